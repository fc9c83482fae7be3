#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace cdm {

// Dense row-major f64 tensor. Rank 0 (scalar), 1, and 2 cover everything the
// nets and losses need; values are immutable once recorded on a tape.
class Tensor {
public:
    Tensor() = default;
    Tensor(std::vector<int64_t> shape, std::vector<double> data);

    static Tensor scalar(double v);
    static Tensor zeros(std::vector<int64_t> shape);
    static Tensor full(std::vector<int64_t> shape, double v);
    static Tensor row(const std::vector<double>& v);     // 1 x n
    static Tensor column(const std::vector<double>& v);  // n x 1
    static Tensor vector(std::vector<double> v);         // rank-1

    const std::vector<int64_t>& shape() const { return shape_; }
    const std::vector<double>& data() const { return data_; }
    std::vector<double>& data() { return data_; }

    int64_t size() const { return static_cast<int64_t>(data_.size()); }
    int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
    int64_t rows() const;
    int64_t cols() const;

    double& at(int64_t r, int64_t c);
    double at(int64_t r, int64_t c) const;
    double item() const;  // requires size() == 1

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;

    std::string shape_str() const;

private:
    std::vector<int64_t> shape_;
    std::vector<double> data_;
};

std::string shape_to_string(const std::vector<int64_t>& shape);
int64_t shape_numel(const std::vector<int64_t>& shape);

}  // namespace cdm
