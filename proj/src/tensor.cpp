#include "fat/tensor.hpp"

#include <sstream>
#include <stdexcept>

namespace fat {

i64 shape_numel(const std::vector<i64>& shape) {
    i64 n = 1;
    for (i64 e : shape) {
        if (e < 1) {
            throw std::invalid_argument("tensor extent must be >= 1, got shape " +
                                        shape_to_string(shape));
        }
        n *= e;
    }
    return n;
}

Tensor::Tensor(std::vector<i64> shape, Precision prec)
    : shape_(std::move(shape)),
      data_(static_cast<std::size_t>(shape_numel(shape_)), 0.0),
      prec_(prec) {}

Tensor Tensor::full(std::vector<i64> shape, double value, Precision prec) {
    Tensor t(std::move(shape), prec);
    for (auto& v : t.data_) v = value;
    t.quantize();
    return t;
}

Tensor Tensor::from_values(std::vector<i64> shape, std::vector<double> values,
                           Precision prec) {
    if (shape_numel(shape) != static_cast<i64>(values.size())) {
        throw std::invalid_argument("value count does not match shape " +
                                    shape_to_string(shape));
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(values);
    t.prec_ = prec;
    t.quantize();
    return t;
}

double Tensor::at4(i64 n, i64 c, i64 h, i64 w) const {
    const i64 C = shape_[1], H = shape_[2], W = shape_[3];
    return data_[static_cast<std::size_t>(((n * C + c) * H + h) * W + w)];
}

double& Tensor::at4(i64 n, i64 c, i64 h, i64 w) {
    const i64 C = shape_[1], H = shape_[2], W = shape_[3];
    return data_[static_cast<std::size_t>(((n * C + c) * H + h) * W + w)];
}

void Tensor::quantize() {
    if (prec_ == Precision::f32) {
        for (auto& v : data_) v = static_cast<double>(static_cast<float>(v));
    }
}

Tensor Tensor::to(Precision prec) const {
    Tensor t = *this;
    t.prec_ = prec;
    t.quantize();
    return t;
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

std::string shape_to_string(const std::vector<i64>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

}  // namespace fat
