#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace lungct {

// Dense row-major double tensor. Conventions used throughout:
//   feature map: (H, W, C)        batch of maps: (N, H, W, C)
//   matrix:      (rows, cols)     vector:        (n,)
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);
  Tensor(std::vector<int> shape, double fill_value);
  Tensor(std::vector<int> shape, std::vector<double> values);

  int ndim() const { return static_cast<int>(shape_.size()); }
  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(int i) { return data_[static_cast<std::size_t>(i)]; }
  double at(int i) const { return data_[static_cast<std::size_t>(i)]; }
  double& at(int i, int j) { return data_[idx2(i, j)]; }
  double at(int i, int j) const { return data_[idx2(i, j)]; }
  double& at(int i, int j, int k) { return data_[idx3(i, j, k)]; }
  double at(int i, int j, int k) const { return data_[idx3(i, j, k)]; }
  double& at(int i, int j, int k, int l) { return data_[idx4(i, j, k, l)]; }
  double at(int i, int j, int k, int l) const { return data_[idx4(i, j, k, l)]; }

  // Same data, new shape; element count must match.
  Tensor reshaped(std::vector<int> new_shape) const;

  void fill(double v);
  void zero() { fill(0.0); }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  std::string shape_str() const;

  Tensor& operator+=(const Tensor& o);
  Tensor& operator*=(double s);

  double min_value() const;
  double max_value() const;
  bool all_finite() const;

 private:
  std::size_t idx2(int i, int j) const {
    return static_cast<std::size_t>(i) * shape_[1] + j;
  }
  std::size_t idx3(int i, int j, int k) const {
    return (static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k;
  }
  std::size_t idx4(int i, int j, int k, int l) const {
    return ((static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k) * shape_[3] + l;
  }

  std::vector<int> shape_;
  std::vector<double> data_;
};

std::size_t shape_numel(const std::vector<int>& shape);

}  // namespace lungct
