#include "fat/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fat {

namespace {

thread_local Tape* g_active_tape = nullptr;

Precision promote(const Var& a, const Var& b) {
    if (a->value.precision() != b->value.precision()) {
        throw std::invalid_argument("mixed-precision op");
    }
    return a->value.precision();
}

Var make_node(Tensor value, std::vector<Var> inputs,
              std::function<void(Node&)> backward) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    bool rg = false;
    for (const auto& in : inputs) rg = rg || in->requires_grad;
    Tape* tape = Tape::active();
    if (tape && rg) {
        n->requires_grad = true;
        n->inputs = std::move(inputs);
        n->backward = std::move(backward);
        for (const auto& in : n->inputs) {
            if (in->tape_id < 0) tape->touch_leaf(in);
        }
        tape->push(n);
    }
    return n;
}

bool channel_broadcast(const Tensor& a, const Tensor& b) {
    return a.rank() == 4 && b.rank() == 1 && b.dim(0) == a.dim(1);
}

void check_binary_shapes(const Tensor& a, const Tensor& b, const char* op) {
    if (!same_shape(a, b) && !channel_broadcast(a, b)) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    a.shape_str() + " vs " + b.shape_str());
    }
}

// Reduce a full-shape gradient onto a per-channel [C] vector.
void accumulate_channel_reduced(Tensor& gb, const Tensor& g) {
    const i64 N = g.dim(0), C = g.dim(1), HW = g.dim(2) * g.dim(3);
    for (i64 n = 0; n < N; ++n) {
        for (i64 c = 0; c < C; ++c) {
            const double* p = g.data() + (n * C + c) * HW;
            double acc = 0.0;
            for (i64 i = 0; i < HW; ++i) acc += p[i];
            gb[c] += acc;
        }
    }
}

double gelu_fwd(double x) {
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    return 0.5 * x * (1.0 + std::tanh(kC * (x + kA * x * x * x)));
}

double gelu_grad(double x) {
    constexpr double kC = 0.7978845608028654;
    constexpr double kA = 0.044715;
    const double u = kC * (x + kA * x * x * x);
    const double t = std::tanh(u);
    const double du = kC * (1.0 + 3.0 * kA * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

}  // namespace

Tape::Tape() {
    prev_ = g_active_tape;
    g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::push(const Var& v) {
    v->tape_id = static_cast<i64>(nodes_.size());
    nodes_.push_back(v);
}

void Tape::touch_leaf(const Var& v) { leaves_.insert(v.get()); }

Tensor& ensure_grad(Node& n) {
    if (n.grad.empty()) n.grad = Tensor(n.value.shape(), n.value.precision());
    return n.grad;
}

std::unordered_map<const Node*, Tensor> Tape::gradients(
    const Var& output, const std::vector<Var>& wrt) {
    if (output->value.numel() != 1) {
        throw std::invalid_argument("gradients: output must be scalar, got " +
                                    output->value.shape_str());
    }
    for (const auto& w : wrt) {
        if (w->tape_id < 0 && leaves_.find(w.get()) == leaves_.end()) {
            throw std::invalid_argument("gradients: tensor not on tape");
        }
    }
    // Reset any state left by a previous backward pass over shared leaves.
    for (const auto& n : nodes_) n->grad = Tensor();
    for (const auto& n : nodes_) {
        for (const auto& in : n->inputs) in->grad = Tensor();
    }
    ensure_grad(*output)[0] = 1.0;
    const i64 last = output->tape_id;
    for (i64 i = last; i >= 0; --i) {
        Node& n = *nodes_[static_cast<std::size_t>(i)];
        if (!n.grad.empty() && n.backward) n.backward(n);
    }
    std::unordered_map<const Node*, Tensor> out;
    for (const auto& w : wrt) {
        out[w.get()] = w->grad.empty()
                           ? Tensor(w->value.shape(), w->value.precision())
                           : w->grad;
    }
    return out;
}

Var leaf(Tensor t) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    n->requires_grad = true;
    return n;
}

Var constant(Tensor t) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    return n;
}

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
    check_binary_shapes(a->value, b->value, "add");
    promote(a, b);
    Tensor out = a->value;
    if (channel_broadcast(a->value, b->value)) {
        const i64 N = out.dim(0), C = out.dim(1), HW = out.dim(2) * out.dim(3);
        for (i64 n = 0; n < N; ++n)
            for (i64 c = 0; c < C; ++c) {
                double* p = out.data() + (n * C + c) * HW;
                const double bv = b->value[c];
                for (i64 i = 0; i < HW; ++i) p[i] += bv;
            }
    } else {
        for (i64 i = 0; i < out.numel(); ++i) out[i] += b->value[i];
    }
    out.quantize();
    return make_node(std::move(out), {a, b}, [](Node& self) {
        Tensor& ga = ensure_grad(*self.inputs[0]);
        Tensor& gb = ensure_grad(*self.inputs[1]);
        for (i64 i = 0; i < ga.numel(); ++i) ga[i] += self.grad[i];
        if (channel_broadcast(self.inputs[0]->value, self.inputs[1]->value)) {
            accumulate_channel_reduced(gb, self.grad);
        } else {
            for (i64 i = 0; i < gb.numel(); ++i) gb[i] += self.grad[i];
        }
    });
}

Var sub(const Var& a, const Var& b) {
    if (!same_shape(a->value, b->value)) {
        throw std::invalid_argument("sub: shape mismatch " + a->value.shape_str() +
                                    " vs " + b->value.shape_str());
    }
    promote(a, b);
    Tensor out = a->value;
    for (i64 i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
    out.quantize();
    return make_node(std::move(out), {a, b}, [](Node& self) {
        Tensor& ga = ensure_grad(*self.inputs[0]);
        Tensor& gb = ensure_grad(*self.inputs[1]);
        for (i64 i = 0; i < ga.numel(); ++i) ga[i] += self.grad[i];
        for (i64 i = 0; i < gb.numel(); ++i) gb[i] -= self.grad[i];
    });
}

Var mul(const Var& a, const Var& b) {
    check_binary_shapes(a->value, b->value, "mul");
    promote(a, b);
    Tensor out = a->value;
    if (channel_broadcast(a->value, b->value)) {
        const i64 N = out.dim(0), C = out.dim(1), HW = out.dim(2) * out.dim(3);
        for (i64 n = 0; n < N; ++n)
            for (i64 c = 0; c < C; ++c) {
                double* p = out.data() + (n * C + c) * HW;
                const double bv = b->value[c];
                for (i64 i = 0; i < HW; ++i) p[i] *= bv;
            }
    } else {
        for (i64 i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
    }
    out.quantize();
    return make_node(std::move(out), {a, b}, [](Node& self) {
        const Tensor& av = self.inputs[0]->value;
        const Tensor& bv = self.inputs[1]->value;
        Tensor& ga = ensure_grad(*self.inputs[0]);
        Tensor& gb = ensure_grad(*self.inputs[1]);
        if (channel_broadcast(av, bv)) {
            const i64 N = av.dim(0), C = av.dim(1), HW = av.dim(2) * av.dim(3);
            for (i64 n = 0; n < N; ++n)
                for (i64 c = 0; c < C; ++c) {
                    const i64 base = (n * C + c) * HW;
                    double acc = 0.0;
                    for (i64 i = 0; i < HW; ++i) {
                        ga[base + i] += self.grad[base + i] * bv[c];
                        acc += self.grad[base + i] * av[base + i];
                    }
                    gb[c] += acc;
                }
        } else {
            for (i64 i = 0; i < ga.numel(); ++i) {
                ga[i] += self.grad[i] * bv[i];
                gb[i] += self.grad[i] * av[i];
            }
        }
    });
}

Var scale(const Var& a, double s) {
    Tensor out = a->value;
    for (i64 i = 0; i < out.numel(); ++i) out[i] *= s;
    out.quantize();
    return make_node(std::move(out), {a}, [s](Node& self) {
        Tensor& ga = ensure_grad(*self.inputs[0]);
        for (i64 i = 0; i < ga.numel(); ++i) ga[i] += self.grad[i] * s;
    });
}

namespace {

Var unary_op(const Var& a, double (*fwd)(double), double (*grad)(double)) {
    Tensor out = a->value;
    for (i64 i = 0; i < out.numel(); ++i) out[i] = fwd(out[i]);
    out.quantize();
    return make_node(std::move(out), {a}, [grad](Node& self) {
        const Tensor& x = self.inputs[0]->value;
        Tensor& ga = ensure_grad(*self.inputs[0]);
        for (i64 i = 0; i < ga.numel(); ++i) ga[i] += self.grad[i] * grad(x[i]);
    });
}

double sigmoid_fwd(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double sigmoid_grad(double x) {
    const double s = sigmoid_fwd(x);
    return s * (1.0 - s);
}
double silu_fwd(double x) { return x * sigmoid_fwd(x); }
double silu_grad(double x) {
    const double s = sigmoid_fwd(x);
    return s * (1.0 + x * (1.0 - s));
}
double relu_fwd(double x) { return x > 0.0 ? x : 0.0; }
double relu_grad(double x) { return x > 0.0 ? 1.0 : 0.0; }

}  // namespace

Var sigmoid_op(const Var& a) { return unary_op(a, sigmoid_fwd, sigmoid_grad); }
Var silu(const Var& a) { return unary_op(a, silu_fwd, silu_grad); }
Var relu(const Var& a) { return unary_op(a, relu_fwd, relu_grad); }
Var gelu(const Var& a) { return unary_op(a, gelu_fwd, gelu_grad); }

// ------------------------------------------------------------- linear algebra

namespace {

void matmul_dims(const Tensor& a, const Tensor& b, i64& B, i64& M, i64& K,
                 i64& N) {
    if (a.rank() == 2 && b.rank() == 2) {
        B = 1;
        M = a.dim(0);
        K = a.dim(1);
        if (b.dim(0) != K) {
            throw std::invalid_argument("matmul: inner dims " + a.shape_str() +
                                        " x " + b.shape_str());
        }
        N = b.dim(1);
    } else if (a.rank() == 3 && b.rank() == 3) {
        if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
            throw std::invalid_argument("matmul: batched dims " + a.shape_str() +
                                        " x " + b.shape_str());
        }
        B = a.dim(0);
        M = a.dim(1);
        K = a.dim(2);
        N = b.dim(2);
    } else {
        throw std::invalid_argument("matmul: rank must be 2 or 3");
    }
}

// C[M,N] += A[M,K] * B[K,N], optionally transposing either input view.
void gemm_acc(const double* a, const double* b, double* c, i64 M, i64 K, i64 N) {
    for (i64 m = 0; m < M; ++m) {
        double* crow = c + m * N;
        for (i64 k = 0; k < K; ++k) {
            const double av = a[m * K + k];
            if (av == 0.0) continue;
            const double* brow = b + k * N;
            for (i64 n = 0; n < N; ++n) crow[n] += av * brow[n];
        }
    }
}

// C[M,K] += A[M,N] * B^T where B is [K,N].
void gemm_bt_acc(const double* a, const double* b, double* c, i64 M, i64 N,
                 i64 K) {
    for (i64 m = 0; m < M; ++m) {
        const double* arow = a + m * N;
        for (i64 k = 0; k < K; ++k) {
            const double* brow = b + k * N;
            double acc = 0.0;
            for (i64 n = 0; n < N; ++n) acc += arow[n] * brow[n];
            c[m * K + k] += acc;
        }
    }
}

// C[K,N] += A^T * B where A is [M,K], B is [M,N].
void gemm_at_acc(const double* a, const double* b, double* c, i64 M, i64 K,
                 i64 N) {
    for (i64 m = 0; m < M; ++m) {
        const double* brow = b + m * N;
        for (i64 k = 0; k < K; ++k) {
            const double av = a[m * K + k];
            if (av == 0.0) continue;
            double* crow = c + k * N;
            for (i64 n = 0; n < N; ++n) crow[n] += av * brow[n];
        }
    }
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
    const Precision prec = promote(a, b);
    i64 B, M, K, N;
    matmul_dims(a->value, b->value, B, M, K, N);
    std::vector<i64> oshape = a->value.rank() == 2 ? std::vector<i64>{M, N}
                                                   : std::vector<i64>{B, M, N};
    Tensor out(oshape, prec);
    for (i64 bb = 0; bb < B; ++bb) {
        gemm_acc(a->value.data() + bb * M * K, b->value.data() + bb * K * N,
                 out.data() + bb * M * N, M, K, N);
    }
    out.quantize();
    return make_node(std::move(out), {a, b}, [B, M, K, N](Node& self) {
        Tensor& ga = ensure_grad(*self.inputs[0]);
        Tensor& gb = ensure_grad(*self.inputs[1]);
        const Tensor& av = self.inputs[0]->value;
        const Tensor& bv = self.inputs[1]->value;
        for (i64 bb = 0; bb < B; ++bb) {
            // dA = dC * B^T ; dB = A^T * dC
            gemm_bt_acc(self.grad.data() + bb * M * N, bv.data() + bb * K * N,
                        ga.data() + bb * M * K, M, N, K);
            gemm_at_acc(av.data() + bb * M * K, self.grad.data() + bb * M * N,
                        gb.data() + bb * K * N, M, K, N);
        }
    });
}

Var softmax_lastdim(const Var& a) {
    const Tensor& x = a->value;
    const i64 L = x.dim(static_cast<std::size_t>(x.rank() - 1));
    const i64 rows = x.numel() / L;
    Tensor out = x;
    for (i64 r = 0; r < rows; ++r) {
        double* p = out.data() + r * L;
        double mx = p[0];
        for (i64 i = 1; i < L; ++i) mx = std::max(mx, p[i]);
        if (!std::isfinite(mx)) {
            throw std::invalid_argument("softmax: non-finite input");
        }
        double denom = 0.0;
        for (i64 i = 0; i < L; ++i) {
            p[i] = std::exp(p[i] - mx);
            denom += p[i];
        }
        for (i64 i = 0; i < L; ++i) p[i] /= denom;
    }
    out.quantize();
    return make_node(std::move(out), {a}, [L, rows](Node& self) {
        Tensor& ga = ensure_grad(*self.inputs[0]);
        for (i64 r = 0; r < rows; ++r) {
            const double* y = self.value.data() + r * L;
            const double* gy = self.grad.data() + r * L;
            double dot = 0.0;
            for (i64 i = 0; i < L; ++i) dot += y[i] * gy[i];
            double* gx = ga.data() + r * L;
            for (i64 i = 0; i < L; ++i) gx[i] += y[i] * (gy[i] - dot);
        }
    });
}

Var linear(const Var& x, const Var& w, const Var& b) {
    const Tensor& xv = x->value;
    const Tensor& wv = w->value;
    if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(1)) {
        throw std::invalid_argument("linear: " + xv.shape_str() + " x " +
                                    wv.shape_str());
    }
    const i64 N = xv.dim(0), Cin = xv.dim(1), Cout = wv.dim(0);
    Tensor out({N, Cout}, xv.precision());
    for (i64 n = 0; n < N; ++n)
        for (i64 o = 0; o < Cout; ++o) {
            double acc = b ? b->value[o] : 0.0;
            const double* xr = xv.data() + n * Cin;
            const double* wr = wv.data() + o * Cin;
            for (i64 i = 0; i < Cin; ++i) acc += xr[i] * wr[i];
            out[n * Cout + o] = acc;
        }
    out.quantize();
    std::vector<Var> ins = {x, w};
    if (b) ins.push_back(b);
    return make_node(std::move(out), std::move(ins),
                     [N, Cin, Cout](Node& self) {
                         const Tensor& xv = self.inputs[0]->value;
                         const Tensor& wv = self.inputs[1]->value;
                         Tensor& gx = ensure_grad(*self.inputs[0]);
                         Tensor& gw = ensure_grad(*self.inputs[1]);
                         for (i64 n = 0; n < N; ++n)
                             for (i64 o = 0; o < Cout; ++o) {
                                 const double g = self.grad[n * Cout + o];
                                 if (g == 0.0) continue;
                                 for (i64 i = 0; i < Cin; ++i) {
                                     gx[n * Cin + i] += g * wv[o * Cin + i];
                                     gw[o * Cin + i] += g * xv[n * Cin + i];
                                 }
                             }
                         if (self.inputs.size() > 2) {
                             Tensor& gb = ensure_grad(*self.inputs[2]);
                             for (i64 n = 0; n < N; ++n)
                                 for (i64 o = 0; o < Cout; ++o)
                                     gb[o] += self.grad[n * Cout + o];
                         }
                     });
}

// --------------------------------------------------------------------- layout

Var reshape(const Var& a, std::vector<i64> shape) {
    if (shape_numel(shape) != a->value.numel()) {
        throw std::invalid_argument("reshape: numel mismatch " +
                                    a->value.shape_str() + " -> " +
                                    shape_to_string(shape));
    }
    Tensor out = Tensor::from_values(shape,
                                     std::vector<double>(a->value.data(),
                                                         a->value.data() +
                                                             a->value.numel()),
                                     a->value.precision());
    return make_node(std::move(out), {a}, [](Node& self) {
        Tensor& ga = ensure_grad(*self.inputs[0]);
        for (i64 i = 0; i < ga.numel(); ++i) ga[i] += self.grad[i];
    });
}

namespace {

std::vector<i64> contiguous_strides(const std::vector<i64>& shape) {
    std::vector<i64> s(shape.size(), 1);
    for (i64 i = static_cast<i64>(shape.size()) - 2; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] =
            s[static_cast<std::size_t>(i + 1)] * shape[static_cast<std::size_t>(i + 1)];
    }
    return s;
}

// out[idx] = in[perm(idx)] mapping for a permutation of axes.
void permute_copy(const Tensor& in, Tensor& out, const std::vector<i64>& perm,
                  bool accumulate_reverse, Tensor* gin) {
    const auto& ishape = in.shape();
    const auto istr = contiguous_strides(ishape);
    std::vector<i64> oshape(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i)
        oshape[i] = ishape[static_cast<std::size_t>(perm[i])];
    const i64 n = in.numel();
    std::vector<i64> idx(perm.size(), 0);
    for (i64 flat = 0; flat < n; ++flat) {
        i64 src = 0;
        for (std::size_t d = 0; d < perm.size(); ++d)
            src += idx[d] * istr[static_cast<std::size_t>(perm[d])];
        if (accumulate_reverse) {
            (*gin)[src] += out[flat];
        } else {
            out[flat] = in[src];
        }
        for (i64 d = static_cast<i64>(perm.size()) - 1; d >= 0; --d) {
            auto du = static_cast<std::size_t>(d);
            if (++idx[du] < oshape[du]) break;
            idx[du] = 0;
        }
    }
}

}  // namespace

Var permute(const Var& a, std::vector<i64> perm) {
    const auto& ishape = a->value.shape();
    if (perm.size() != ishape.size()) {
        throw std::invalid_argument("permute: rank mismatch");
    }
    std::vector<i64> oshape(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i)
        oshape[i] = ishape[static_cast<std::size_t>(perm[i])];
    Tensor out(oshape, a->value.precision());
    permute_copy(a->value, out, perm, false, nullptr);
    return make_node(std::move(out), {a}, [perm](Node& self) {
        Tensor& ga = ensure_grad(*self.inputs[0]);
        permute_copy(self.inputs[0]->value, self.grad, perm, true, &ga);
    });
}

Var concat_channels(const Var& a, const Var& b) {
    const Tensor& av = a->value;
    const Tensor& bv = b->value;
    if (av.rank() != 4 || bv.rank() != 4 || av.dim(0) != bv.dim(0) ||
        av.dim(2) != bv.dim(2) || av.dim(3) != bv.dim(3)) {
        throw std::invalid_argument("concat_channels: " + av.shape_str() +
                                    " vs " + bv.shape_str());
    }
    const i64 N = av.dim(0), Ca = av.dim(1), Cb = bv.dim(1),
              HW = av.dim(2) * av.dim(3);
    Tensor out({N, Ca + Cb, av.dim(2), av.dim(3)}, promote(a, b));
    for (i64 n = 0; n < N; ++n) {
        std::copy_n(av.data() + n * Ca * HW, Ca * HW,
                    out.data() + n * (Ca + Cb) * HW);
        std::copy_n(bv.data() + n * Cb * HW, Cb * HW,
                    out.data() + (n * (Ca + Cb) + Ca) * HW);
    }
    return make_node(std::move(out), {a, b}, [N, Ca, Cb, HW](Node& self) {
        Tensor& ga = ensure_grad(*self.inputs[0]);
        Tensor& gb = ensure_grad(*self.inputs[1]);
        for (i64 n = 0; n < N; ++n) {
            const double* g = self.grad.data() + n * (Ca + Cb) * HW;
            for (i64 i = 0; i < Ca * HW; ++i) ga[n * Ca * HW + i] += g[i];
            for (i64 i = 0; i < Cb * HW; ++i)
                gb[n * Cb * HW + i] += g[Ca * HW + i];
        }
    });
}

Var slice_channels(const Var& a, i64 start, i64 count) {
    const Tensor& av = a->value;
    if (av.rank() != 4 || start < 0 || count < 1 ||
        start + count > av.dim(1)) {
        throw std::invalid_argument("slice_channels: bad range");
    }
    const i64 N = av.dim(0), C = av.dim(1), HW = av.dim(2) * av.dim(3);
    Tensor out({N, count, av.dim(2), av.dim(3)}, av.precision());
    for (i64 n = 0; n < N; ++n)
        std::copy_n(av.data() + (n * C + start) * HW, count * HW,
                    out.data() + n * count * HW);
    return make_node(std::move(out), {a}, [N, C, HW, start, count](Node& self) {
        Tensor& ga = ensure_grad(*self.inputs[0]);
        for (i64 n = 0; n < N; ++n)
            for (i64 i = 0; i < count * HW; ++i)
                ga[(n * C + start) * HW + i] += self.grad[n * count * HW + i];
    });
}

// ----------------------------------------------------------------- reductions

Var sum_all(const Var& a) {
    double acc = 0.0;
    for (i64 i = 0; i < a->value.numel(); ++i) acc += a->value[i];
    Tensor out = Tensor::from_values({1}, {acc}, a->value.precision());
    return make_node(std::move(out), {a}, [](Node& self) {
        Tensor& ga = ensure_grad(*self.inputs[0]);
        const double g = self.grad[0];
        for (i64 i = 0; i < ga.numel(); ++i) ga[i] += g;
    });
}

Var mean_all(const Var& a) {
    return scale(sum_all(a), 1.0 / static_cast<double>(a->value.numel()));
}

// --------------------------------------------------------------------- layers

i64 conv_out_extent(i64 in, i64 kernel, i64 stride, i64 pad) {
    return (in + 2 * pad - kernel) / stride + 1;
}

Var conv2d(const Var& x, const Var& w, const Var& b, i64 stride, i64 pad,
           i64 groups) {
    const Tensor& xv = x->value;
    const Tensor& wv = w->value;
    if (xv.rank() != 4 || wv.rank() != 4) {
        throw std::invalid_argument("conv2d: rank-4 tensors required");
    }
    const i64 N = xv.dim(0), Cin = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const i64 Cout = wv.dim(0), k = wv.dim(2);
    if (groups < 1 || Cin % groups != 0 || Cout % groups != 0) {
        throw std::invalid_argument("conv2d: channel counts not divisible by groups");
    }
    if (wv.dim(1) != Cin / groups || wv.dim(3) != k) {
        throw std::invalid_argument("conv2d: weight shape " + wv.shape_str() +
                                    " does not match input " + xv.shape_str());
    }
    const i64 Ho = conv_out_extent(H, k, stride, pad);
    const i64 Wo = conv_out_extent(W, k, stride, pad);
    if (Ho < 1 || Wo < 1) {
        throw std::invalid_argument("conv2d: non-positive output extent");
    }
    const i64 cpg_in = Cin / groups, cpg_out = Cout / groups;
    Tensor out({N, Cout, Ho, Wo}, xv.precision());
    for (i64 n = 0; n < N; ++n) {
        for (i64 co = 0; co < Cout; ++co) {
            const i64 g = co / cpg_out;
            double* yplane = out.data() + (n * Cout + co) * Ho * Wo;
            if (b) {
                const double bv = b->value[co];
                for (i64 i = 0; i < Ho * Wo; ++i) yplane[i] = bv;
            }
            for (i64 cl = 0; cl < cpg_in; ++cl) {
                const i64 ci = g * cpg_in + cl;
                const double* xplane = xv.data() + (n * Cin + ci) * H * W;
                const double* wk = wv.data() + (co * cpg_in + cl) * k * k;
                for (i64 ky = 0; ky < k; ++ky) {
                    for (i64 ho = 0; ho < Ho; ++ho) {
                        const i64 ih = ho * stride - pad + ky;
                        if (ih < 0 || ih >= H) continue;
                        const double* xrow = xplane + ih * W;
                        double* yrow = yplane + ho * Wo;
                        for (i64 kx = 0; kx < k; ++kx) {
                            const double wvv = wk[ky * k + kx];
                            if (wvv == 0.0) continue;
                            // valid wo range: 0 <= wo*stride - pad + kx < W
                            i64 lo = 0;
                            if (pad - kx > 0) lo = (pad - kx + stride - 1) / stride;
                            i64 hi = Wo;  // exclusive
                            {
                                const i64 lim = W - 1 + pad - kx;
                                if (lim < 0)
                                    hi = 0;
                                else
                                    hi = std::min<i64>(Wo, lim / stride + 1);
                            }
                            const double* xo = xrow - pad + kx;
                            for (i64 wo = lo; wo < hi; ++wo)
                                yrow[wo] += wvv * xo[wo * stride];
                        }
                    }
                }
            }
        }
    }
    out.quantize();
    std::vector<Var> ins = {x, w};
    if (b) ins.push_back(b);
    return make_node(
        std::move(out), std::move(ins),
        [N, Cin, Cout, H, W, Ho, Wo, k, stride, pad, cpg_in, cpg_out](Node& self) {
            const Tensor& xv = self.inputs[0]->value;
            const Tensor& wv = self.inputs[1]->value;
            Tensor& gx = ensure_grad(*self.inputs[0]);
            Tensor& gw = ensure_grad(*self.inputs[1]);
            for (i64 n = 0; n < N; ++n) {
                for (i64 co = 0; co < Cout; ++co) {
                    const i64 g = co / cpg_out;
                    const double* gplane =
                        self.grad.data() + (n * Cout + co) * Ho * Wo;
                    for (i64 cl = 0; cl < cpg_in; ++cl) {
                        const i64 ci = g * cpg_in + cl;
                        const double* xplane = xv.data() + (n * Cin + ci) * H * W;
                        double* gxplane = gx.data() + (n * Cin + ci) * H * W;
                        const double* wk = wv.data() + (co * cpg_in + cl) * k * k;
                        double* gwk = gw.data() + (co * cpg_in + cl) * k * k;
                        for (i64 ky = 0; ky < k; ++ky) {
                            for (i64 ho = 0; ho < Ho; ++ho) {
                                const i64 ih = ho * stride - pad + ky;
                                if (ih < 0 || ih >= H) continue;
                                const double* xrow = xplane + ih * W;
                                double* gxrow = gxplane + ih * W;
                                const double* grow = gplane + ho * Wo;
                                for (i64 kx = 0; kx < k; ++kx) {
                                    i64 lo = 0;
                                    if (pad - kx > 0)
                                        lo = (pad - kx + stride - 1) / stride;
                                    i64 hi = Wo;
                                    {
                                        const i64 lim = W - 1 + pad - kx;
                                        hi = lim < 0
                                                 ? 0
                                                 : std::min<i64>(Wo, lim / stride + 1);
                                    }
                                    const double wvv = wk[ky * k + kx];
                                    double acc = 0.0;
                                    const i64 off = kx - pad;
                                    for (i64 wo = lo; wo < hi; ++wo) {
                                        const i64 iw = wo * stride + off;
                                        const double gv = grow[wo];
                                        gxrow[iw] += wvv * gv;
                                        acc += xrow[iw] * gv;
                                    }
                                    gwk[ky * k + kx] += acc;
                                }
                            }
                        }
                    }
                }
            }
            if (self.inputs.size() > 2) {
                Tensor& gb = ensure_grad(*self.inputs[2]);
                accumulate_channel_reduced(gb, self.grad);
            }
        });
}

Var batchnorm_infer(const Var& x, const Var& gamma, const Var& beta,
                    const Var& running_mean, const Var& running_var,
                    double eps) {
    const Tensor& xv = x->value;
    const i64 C = xv.dim(1);
    if (gamma->value.numel() != C || beta->value.numel() != C ||
        running_mean->value.numel() != C || running_var->value.numel() != C) {
        throw std::invalid_argument("batchnorm: channel mismatch for input " +
                                    xv.shape_str());
    }
    const i64 N = xv.dim(0), HW = xv.dim(2) * xv.dim(3);
    Tensor out = xv;
    std::vector<double> scale_c(static_cast<std::size_t>(C));
    for (i64 c = 0; c < C; ++c) {
        scale_c[static_cast<std::size_t>(c)] =
            gamma->value[c] / std::sqrt(running_var->value[c] + eps);
    }
    for (i64 n = 0; n < N; ++n)
        for (i64 c = 0; c < C; ++c) {
            double* p = out.data() + (n * C + c) * HW;
            const double s = scale_c[static_cast<std::size_t>(c)];
            const double sh = beta->value[c] - running_mean->value[c] * s;
            for (i64 i = 0; i < HW; ++i) p[i] = p[i] * s + sh;
        }
    out.quantize();
    return make_node(
        std::move(out), {x, gamma, beta, running_mean, running_var},
        [N, C, HW, eps](Node& self) {
            const Tensor& xv = self.inputs[0]->value;
            const Tensor& gv = self.inputs[1]->value;
            const Tensor& mv = self.inputs[3]->value;
            const Tensor& vv = self.inputs[4]->value;
            Tensor& gx = ensure_grad(*self.inputs[0]);
            Tensor& ggamma = ensure_grad(*self.inputs[1]);
            Tensor& gbeta = ensure_grad(*self.inputs[2]);
            for (i64 n = 0; n < N; ++n)
                for (i64 c = 0; c < C; ++c) {
                    const double inv = 1.0 / std::sqrt(vv[c] + eps);
                    const double s = gv[c] * inv;
                    const i64 base = (n * C + c) * HW;
                    double acc_g = 0.0, acc_b = 0.0;
                    for (i64 i = 0; i < HW; ++i) {
                        const double g = self.grad[base + i];
                        gx[base + i] += g * s;
                        acc_g += g * (xv[base + i] - mv[c]) * inv;
                        acc_b += g;
                    }
                    ggamma[c] += acc_g;
                    gbeta[c] += acc_b;
                }
        });
}

namespace {

// Shared layer-norm core: normalizes `rows` rows of length C where element
// (row, c) lives at base(row) + c * cstride.
struct LnLayout {
    i64 rows;
    i64 C;
    i64 cstride;
    std::vector<i64> bases;
};

LnLayout ln_layout_nchw(const Tensor& x) {
    const i64 N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    LnLayout l{N * H * W, C, H * W, {}};
    l.bases.reserve(static_cast<std::size_t>(l.rows));
    for (i64 n = 0; n < N; ++n)
        for (i64 h = 0; h < H; ++h)
            for (i64 w = 0; w < W; ++w) l.bases.push_back((n * C) * H * W + h * W + w);
    return l;
}

LnLayout ln_layout_rows(const Tensor& x) {
    const i64 N = x.dim(0), C = x.dim(1);
    LnLayout l{N, C, 1, {}};
    for (i64 n = 0; n < N; ++n) l.bases.push_back(n * C);
    return l;
}

Var layernorm_impl(const Var& x, const Var& gamma, const Var& beta, double eps,
                   bool nchw) {
    const Tensor& xv = x->value;
    if ((nchw && xv.rank() != 4) || (!nchw && xv.rank() != 2)) {
        throw std::invalid_argument("layernorm: unexpected rank for " +
                                    xv.shape_str());
    }
    const i64 C = xv.dim(1);
    if (gamma->value.numel() != C || beta->value.numel() != C) {
        throw std::invalid_argument("layernorm: channel mismatch");
    }
    const LnLayout lay = nchw ? ln_layout_nchw(xv) : ln_layout_rows(xv);
    Tensor out = xv;
    for (i64 r = 0; r < lay.rows; ++r) {
        const i64 base = lay.bases[static_cast<std::size_t>(r)];
        double mean = 0.0;
        for (i64 c = 0; c < C; ++c) mean += xv[base + c * lay.cstride];
        mean /= static_cast<double>(C);
        double var = 0.0;
        for (i64 c = 0; c < C; ++c) {
            const double d = xv[base + c * lay.cstride] - mean;
            var += d * d;
        }
        var /= static_cast<double>(C);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (i64 c = 0; c < C; ++c) {
            const i64 idx = base + c * lay.cstride;
            out[idx] = (xv[idx] - mean) * inv * gamma->value[c] + beta->value[c];
        }
    }
    out.quantize();
    return make_node(std::move(out), {x, gamma, beta}, [lay, eps](Node& self) {
        const Tensor& xv = self.inputs[0]->value;
        const Tensor& gv = self.inputs[1]->value;
        Tensor& gx = ensure_grad(*self.inputs[0]);
        Tensor& ggamma = ensure_grad(*self.inputs[1]);
        Tensor& gbeta = ensure_grad(*self.inputs[2]);
        const i64 C = lay.C;
        std::vector<double> xhat(static_cast<std::size_t>(C));
        std::vector<double> dxhat(static_cast<std::size_t>(C));
        for (i64 r = 0; r < lay.rows; ++r) {
            const i64 base = lay.bases[static_cast<std::size_t>(r)];
            double mean = 0.0;
            for (i64 c = 0; c < C; ++c) mean += xv[base + c * lay.cstride];
            mean /= static_cast<double>(C);
            double var = 0.0;
            for (i64 c = 0; c < C; ++c) {
                const double d = xv[base + c * lay.cstride] - mean;
                var += d * d;
            }
            var /= static_cast<double>(C);
            const double inv = 1.0 / std::sqrt(var + eps);
            double m_dxhat = 0.0, m_dxhat_xhat = 0.0;
            for (i64 c = 0; c < C; ++c) {
                const i64 idx = base + c * lay.cstride;
                const auto cu = static_cast<std::size_t>(c);
                xhat[cu] = (xv[idx] - mean) * inv;
                const double g = self.grad[idx];
                dxhat[cu] = g * gv[c];
                ggamma[c] += g * xhat[cu];
                gbeta[c] += g;
                m_dxhat += dxhat[cu];
                m_dxhat_xhat += dxhat[cu] * xhat[cu];
            }
            m_dxhat /= static_cast<double>(C);
            m_dxhat_xhat /= static_cast<double>(C);
            for (i64 c = 0; c < C; ++c) {
                const auto cu = static_cast<std::size_t>(c);
                gx[base + c * lay.cstride] +=
                    inv * (dxhat[cu] - m_dxhat - xhat[cu] * m_dxhat_xhat);
            }
        }
    });
}

}  // namespace

Var layernorm_nchw(const Var& x, const Var& gamma, const Var& beta, double eps) {
    return layernorm_impl(x, gamma, beta, eps, true);
}

Var layernorm_rows(const Var& x, const Var& gamma, const Var& beta, double eps) {
    return layernorm_impl(x, gamma, beta, eps, false);
}

Var global_avg_pool(const Var& x) {
    const Tensor& xv = x->value;
    const i64 N = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
    Tensor out({N, C}, xv.precision());
    for (i64 n = 0; n < N; ++n)
        for (i64 c = 0; c < C; ++c) {
            const double* p = xv.data() + (n * C + c) * HW;
            double acc = 0.0;
            for (i64 i = 0; i < HW; ++i) acc += p[i];
            out[n * C + c] = acc / static_cast<double>(HW);
        }
    out.quantize();
    return make_node(std::move(out), {x}, [N, C, HW](Node& self) {
        Tensor& gx = ensure_grad(*self.inputs[0]);
        for (i64 n = 0; n < N; ++n)
            for (i64 c = 0; c < C; ++c) {
                const double g = self.grad[n * C + c] / static_cast<double>(HW);
                double* p = gx.data() + (n * C + c) * HW;
                for (i64 i = 0; i < HW; ++i) p[i] += g;
            }
    });
}

Var avg_pool2d(const Var& x, i64 kernel, i64 stride) {
    const Tensor& xv = x->value;
    const i64 N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const i64 Ho = conv_out_extent(H, kernel, stride, 0);
    const i64 Wo = conv_out_extent(W, kernel, stride, 0);
    if (Ho < 1 || Wo < 1) {
        throw std::invalid_argument("avg_pool2d: non-positive output extent");
    }
    Tensor out({N, C, Ho, Wo}, xv.precision());
    const double norm = 1.0 / static_cast<double>(kernel * kernel);
    for (i64 n = 0; n < N; ++n)
        for (i64 c = 0; c < C; ++c)
            for (i64 ho = 0; ho < Ho; ++ho)
                for (i64 wo = 0; wo < Wo; ++wo) {
                    double acc = 0.0;
                    for (i64 ky = 0; ky < kernel; ++ky)
                        for (i64 kx = 0; kx < kernel; ++kx)
                            acc += xv.at4(n, c, ho * stride + ky, wo * stride + kx);
                    out.at4(n, c, ho, wo) = acc * norm;
                }
    out.quantize();
    return make_node(std::move(out), {x},
                     [N, C, Ho, Wo, kernel, stride, norm](Node& self) {
                         Tensor& gx = ensure_grad(*self.inputs[0]);
                         for (i64 n = 0; n < N; ++n)
                             for (i64 c = 0; c < C; ++c)
                                 for (i64 ho = 0; ho < Ho; ++ho)
                                     for (i64 wo = 0; wo < Wo; ++wo) {
                                         const double g =
                                             self.grad.at4(n, c, ho, wo) * norm;
                                         for (i64 ky = 0; ky < kernel; ++ky)
                                             for (i64 kx = 0; kx < kernel; ++kx)
                                                 gx.at4(n, c, ho * stride + ky,
                                                        wo * stride + kx) += g;
                                     }
                     });
}

Var mhsa_pooled(const Var& q, const Var& k, const Var& v, i64 heads) {
    const Tensor& qv = q->value;
    const i64 N = qv.dim(0), C = qv.dim(1), H = qv.dim(2), W = qv.dim(3);
    if (C % heads != 0) {
        throw std::invalid_argument("mhsa: channels not divisible by heads");
    }
    if (k->value.dim(0) != N || k->value.dim(1) != C ||
        !same_shape(k->value, v->value)) {
        throw std::invalid_argument("mhsa: key/value shape mismatch");
    }
    const i64 d = C / heads;
    const i64 hw = k->value.dim(2) * k->value.dim(3);
    auto qb = reshape(permute(reshape(q, {N, heads, d, H * W}), {0, 1, 3, 2}),
                      {N * heads, H * W, d});
    auto kb = reshape(k, {N * heads, d, hw});
    auto attn = softmax_lastdim(
        scale(matmul(qb, kb), 1.0 / std::sqrt(static_cast<double>(d))));
    auto vb = reshape(permute(reshape(v, {N, heads, d, hw}), {0, 1, 3, 2}),
                      {N * heads, hw, d});
    auto ob = matmul(attn, vb);  // [N*heads, HW, d]
    return reshape(permute(reshape(ob, {N, heads, H * W, d}), {0, 1, 3, 2}),
                   {N, C, H, W});
}

Tensor mhsa_attention_weights(const Tensor& q, const Tensor& k, i64 heads) {
    const i64 N = q.dim(0), C = q.dim(1), H = q.dim(2), W = q.dim(3);
    const i64 d = C / heads;
    const i64 hw = k.dim(2) * k.dim(3);
    auto qb = reshape(permute(reshape(constant(q), {N, heads, d, H * W}),
                              {0, 1, 3, 2}),
                      {N * heads, H * W, d});
    auto kb = reshape(constant(k), {N * heads, d, hw});
    auto attn = softmax_lastdim(
        scale(matmul(qb, kb), 1.0 / std::sqrt(static_cast<double>(d))));
    return attn->value;
}

}  // namespace fat
