#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "fat/tensor.hpp"

namespace fat {

struct WeightEntry {
    std::string name;
    bool learned = true;
    Tensor tensor;
};

/// Ordered named-tensor container with a bit-exact on-disk layout:
/// magic "FATW", version u32 (=1), entry count u64; per entry: name length
/// u16, name bytes, learned flag u8, rank u8, extents u32 x rank, raw 32-bit
/// float payload. Little-endian throughout.
class WeightStore {
public:
    void add(std::string name, bool learned, Tensor tensor);
    bool contains(const std::string& name) const;
    const WeightEntry& get(const std::string& name) const;
    const std::vector<WeightEntry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }

    /// Total scalar count, optionally restricted to learned entries.
    i64 scalar_count(bool learned_only) const;

    void save(const std::string& path) const;
    static WeightStore load(const std::string& path);

private:
    std::vector<WeightEntry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace fat
