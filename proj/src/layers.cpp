#include "fat/layers.hpp"

#include <stdexcept>

namespace fat {

Var ParamRegistry::create(std::string name, std::vector<i64> shape, bool learned,
                          InitKind init, Precision prec) {
    Var v = leaf(Tensor(std::move(shape), prec));
    entries_.push_back({std::move(name), v, learned, init});
    return v;
}

ConvLayer make_conv(ParamRegistry& reg, const std::string& name, i64 cin,
                    i64 cout, i64 kernel, i64 stride, i64 pad, i64 groups,
                    bool bias, Precision prec) {
    ConvLayer l;
    l.cin = cin;
    l.cout = cout;
    l.kernel = kernel;
    l.stride = stride;
    l.pad = pad;
    l.groups = groups;
    // 1x1 convolutions are channel projections and share the projection init.
    const InitKind wi = kernel == 1 ? InitKind::TruncNormal002 : InitKind::FanInNormal;
    l.weight = reg.create(name + ".weight", {cout, cin / groups, kernel, kernel},
                          true, wi, prec);
    if (bias) l.bias = reg.create(name + ".bias", {cout}, true, InitKind::Zero, prec);
    return l;
}

NormLayer make_norm(ParamRegistry& reg, const std::string& name, NormKind kind,
                    i64 channels, Precision prec, double eps) {
    NormLayer l;
    l.kind = kind;
    l.channels = channels;
    l.eps = eps;
    l.gamma = reg.create(name + ".gamma", {channels}, true, InitKind::One, prec);
    l.beta = reg.create(name + ".beta", {channels}, true, InitKind::Zero, prec);
    if (kind == NormKind::Batch) {
        l.running_mean =
            reg.create(name + ".running_mean", {channels}, false, InitKind::Zero, prec);
        l.running_var =
            reg.create(name + ".running_var", {channels}, false, InitKind::One, prec);
    }
    return l;
}

LinearLayer make_linear(ParamRegistry& reg, const std::string& name, i64 cin,
                        i64 cout, Precision prec) {
    LinearLayer l;
    l.cin = cin;
    l.cout = cout;
    l.weight = reg.create(name + ".weight", {cout, cin}, true,
                          InitKind::TruncNormal002, prec);
    l.bias = reg.create(name + ".bias", {cout}, true, InitKind::Zero, prec);
    return l;
}

Var apply_layer(const ConvLayer& l, const Var& x) {
    return conv2d(x, l.weight, l.bias, l.stride, l.pad, l.groups);
}

Var apply_layer(const NormLayer& l, const Var& x) {
    if (l.kind == NormKind::Batch) {
        return batchnorm_infer(x, l.gamma, l.beta, l.running_mean, l.running_var,
                               l.eps);
    }
    if (x->value.rank() == 2) return layernorm_rows(x, l.gamma, l.beta, l.eps);
    return layernorm_nchw(x, l.gamma, l.beta, l.eps);
}

Var apply_layer(const LinearLayer& l, const Var& x) {
    return linear(x, l.weight, l.bias);
}

}  // namespace fat
