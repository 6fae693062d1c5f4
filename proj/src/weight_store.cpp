#include "fat/weight_store.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace fat {

namespace {

constexpr char kMagic[4] = {'F', 'A', 'T', 'W'};
constexpr std::uint32_t kVersion = 1;

[[noreturn]] void fail_at(const std::string& what, std::uint64_t offset) {
    throw std::runtime_error("weight store: " + what + " at byte offset " +
                             std::to_string(offset));
}

template <typename T>
void write_le(std::ofstream& f, T v) {
    unsigned char buf[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i)
        buf[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF);
    f.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::ifstream& f, std::uint64_t& offset) {
    unsigned char buf[sizeof(T)];
    f.read(reinterpret_cast<char*>(buf), sizeof(T));
    if (!f) fail_at("truncated file", offset);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
        v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    offset += sizeof(T);
    return static_cast<T>(v);
}

}  // namespace

void WeightStore::add(std::string name, bool learned, Tensor tensor) {
    if (index_.count(name)) {
        throw std::invalid_argument("weight store: duplicate name " + name);
    }
    index_[name] = entries_.size();
    entries_.push_back({std::move(name), learned, std::move(tensor)});
}

bool WeightStore::contains(const std::string& name) const {
    return index_.count(name) != 0;
}

const WeightEntry& WeightStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) {
        throw std::invalid_argument("weight store: missing entry " + name);
    }
    return entries_[it->second];
}

i64 WeightStore::scalar_count(bool learned_only) const {
    i64 n = 0;
    for (const auto& e : entries_) {
        if (!learned_only || e.learned) n += e.tensor.numel();
    }
    return n;
}

void WeightStore::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("weight store: cannot open " + path);
    f.write(kMagic, 4);
    write_le<std::uint32_t>(f, kVersion);
    write_le<std::uint64_t>(f, entries_.size());
    for (const auto& e : entries_) {
        if (e.name.size() > 0xFFFF) {
            throw std::invalid_argument("weight store: name too long");
        }
        write_le<std::uint16_t>(f, static_cast<std::uint16_t>(e.name.size()));
        f.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        write_le<std::uint8_t>(f, e.learned ? 1 : 0);
        write_le<std::uint8_t>(f, static_cast<std::uint8_t>(e.tensor.rank()));
        for (i64 d : e.tensor.shape())
            write_le<std::uint32_t>(f, static_cast<std::uint32_t>(d));
        for (i64 i = 0; i < e.tensor.numel(); ++i) {
            const float v = static_cast<float>(e.tensor[i]);
            std::uint32_t bits;
            std::memcpy(&bits, &v, 4);
            write_le<std::uint32_t>(f, bits);
        }
    }
    if (!f) throw std::runtime_error("weight store: write failed for " + path);
}

WeightStore WeightStore::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("weight store: cannot open " + path);
    std::uint64_t offset = 0;
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kMagic, 4) != 0) fail_at("bad magic", 0);
    offset = 4;
    const auto version = read_le<std::uint32_t>(f, offset);
    if (version != kVersion) fail_at("unsupported version " + std::to_string(version), 4);
    const auto count = read_le<std::uint64_t>(f, offset);
    WeightStore store;
    for (std::uint64_t e = 0; e < count; ++e) {
        const auto name_len = read_le<std::uint16_t>(f, offset);
        std::string name(name_len, '\0');
        f.read(name.data(), name_len);
        if (!f) fail_at("truncated name", offset);
        offset += name_len;
        const auto learned = read_le<std::uint8_t>(f, offset);
        const auto rank = read_le<std::uint8_t>(f, offset);
        std::vector<i64> shape;
        for (std::uint8_t r = 0; r < rank; ++r)
            shape.push_back(static_cast<i64>(read_le<std::uint32_t>(f, offset)));
        const i64 n = shape_numel(shape);
        std::vector<double> values(static_cast<std::size_t>(n));
        for (i64 i = 0; i < n; ++i) {
            const auto bits = read_le<std::uint32_t>(f, offset);
            float v;
            std::uint32_t b32 = bits;
            std::memcpy(&v, &b32, 4);
            values[static_cast<std::size_t>(i)] = static_cast<double>(v);
        }
        store.add(std::move(name), learned != 0,
                  Tensor::from_values(std::move(shape), std::move(values)));
    }
    return store;
}

}  // namespace fat
