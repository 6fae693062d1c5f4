#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace fat {

using i64 = std::int64_t;

/// Storage precision. f32 tensors hold values representable as IEEE-754
/// single precision; arithmetic is carried out in double and results are
/// rounded back through float after every op. f64 skips the rounding and is
/// used for gradient-verification runs.
enum class Precision { f32, f64 };

i64 shape_numel(const std::vector<i64>& shape);

/// Dense row-major tensor. Feature maps use NCHW order.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<i64> shape, Precision prec = Precision::f32);

    static Tensor full(std::vector<i64> shape, double value,
                       Precision prec = Precision::f32);
    static Tensor from_values(std::vector<i64> shape, std::vector<double> values,
                              Precision prec = Precision::f32);

    const std::vector<i64>& shape() const { return shape_; }
    i64 dim(std::size_t i) const { return shape_[i]; }
    std::size_t rank() const { return shape_.size(); }
    i64 numel() const { return static_cast<i64>(data_.size()); }
    bool empty() const { return data_.empty(); }
    Precision precision() const { return prec_; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double operator[](i64 i) const { return data_[static_cast<std::size_t>(i)]; }
    double& operator[](i64 i) { return data_[static_cast<std::size_t>(i)]; }

    // Element (n,c,h,w) lives at ((n*C + c)*H + h)*W + w.
    double at4(i64 n, i64 c, i64 h, i64 w) const;
    double& at4(i64 n, i64 c, i64 h, i64 w);

    /// Round every element through float when the tensor is f32.
    void quantize();
    Tensor to(Precision prec) const;

    std::string shape_str() const;

private:
    std::vector<i64> shape_;
    std::vector<double> data_;
    Precision prec_ = Precision::f32;
};

bool same_shape(const Tensor& a, const Tensor& b);
std::string shape_to_string(const std::vector<i64>& shape);

}  // namespace fat
