#pragma once

#include <string>
#include <vector>

#include "fat/ops.hpp"

namespace fat {

enum class InitKind { TruncNormal002, FanInNormal, Zero, One };

struct ParamEntry {
    std::string name;
    Var var;
    bool learned = true;
    InitKind init = InitKind::Zero;
};

/// Creation-ordered registry of every parameter tensor in a model. The order
/// defines both the deterministic initialization stream and the weight-store
/// layout.
class ParamRegistry {
public:
    Var create(std::string name, std::vector<i64> shape, bool learned,
               InitKind init, Precision prec);
    const std::vector<ParamEntry>& entries() const { return entries_; }
    std::vector<ParamEntry>& entries() { return entries_; }

private:
    std::vector<ParamEntry> entries_;
};

struct ConvLayer {
    i64 cin = 0, cout = 0, kernel = 0, stride = 1, pad = 0, groups = 1;
    Var weight, bias;  // bias may be null
};

enum class NormKind { Batch, Layer };

struct NormLayer {
    NormKind kind = NormKind::Layer;
    i64 channels = 0;
    double eps = 1e-5;
    Var gamma, beta;
    Var running_mean, running_var;  // batch norm only, non-learned
};

struct LinearLayer {
    i64 cin = 0, cout = 0;
    Var weight, bias;
};

ConvLayer make_conv(ParamRegistry& reg, const std::string& name, i64 cin,
                    i64 cout, i64 kernel, i64 stride, i64 pad, i64 groups,
                    bool bias, Precision prec);
NormLayer make_norm(ParamRegistry& reg, const std::string& name, NormKind kind,
                    i64 channels, Precision prec, double eps = 1e-5);
LinearLayer make_linear(ParamRegistry& reg, const std::string& name, i64 cin,
                        i64 cout, Precision prec);

Var apply_layer(const ConvLayer& l, const Var& x);
Var apply_layer(const NormLayer& l, const Var& x);  // LN dispatches on input rank
Var apply_layer(const LinearLayer& l, const Var& x);

}  // namespace fat
