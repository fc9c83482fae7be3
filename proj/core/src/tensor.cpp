#include "cdm/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace cdm {

int64_t shape_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

std::string shape_to_string(const std::vector<int64_t>& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(std::vector<int64_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    for (int64_t d : shape_) {
        if (d < 0) throw std::invalid_argument("Tensor: negative dimension in " + shape_to_string(shape_));
    }
    if (shape_numel(shape_) != static_cast<int64_t>(data_.size())) {
        throw std::invalid_argument("Tensor: shape " + shape_to_string(shape_) + " does not match data size " +
                                    std::to_string(data_.size()));
    }
}

Tensor Tensor::scalar(double v) { return Tensor({}, {v}); }

Tensor Tensor::zeros(std::vector<int64_t> shape) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(static_cast<size_t>(n), 0.0));
}

Tensor Tensor::full(std::vector<int64_t> shape, double v) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(static_cast<size_t>(n), v));
}

Tensor Tensor::row(const std::vector<double>& v) {
    return Tensor({1, static_cast<int64_t>(v.size())}, v);
}

Tensor Tensor::column(const std::vector<double>& v) {
    return Tensor({static_cast<int64_t>(v.size()), 1}, v);
}

Tensor Tensor::vector(std::vector<double> v) {
    auto n = static_cast<int64_t>(v.size());
    return Tensor({n}, std::move(v));
}

int64_t Tensor::rows() const {
    if (shape_.empty()) return 1;
    return shape_[0];
}

int64_t Tensor::cols() const {
    if (shape_.size() < 2) return shape_.empty() ? 1 : 1;
    return shape_[1];
}

double& Tensor::at(int64_t r, int64_t c) {
    return data_[static_cast<size_t>(r * cols() + c)];
}

double Tensor::at(int64_t r, int64_t c) const {
    return data_[static_cast<size_t>(r * cols() + c)];
}

double Tensor::item() const {
    if (data_.size() != 1) throw std::logic_error("Tensor::item on non-scalar of shape " + shape_str());
    return data_[0];
}

bool Tensor::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

}  // namespace cdm
