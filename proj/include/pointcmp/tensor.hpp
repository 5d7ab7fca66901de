#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <vector>

namespace pointcmp {

// Dense row-major matrix of doubles. Everything in the stack is 2-D:
// vectors are (n x 1) or (1 x n), scalars are (1 x 1).
class Tensor {
 public:
  Tensor() : rows_(0), cols_(0) {}
  Tensor(int64_t rows, int64_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(static_cast<size_t>(rows * cols), fill) {}

  static Tensor zeros(int64_t rows, int64_t cols) { return Tensor(rows, cols, 0.0); }
  static Tensor scalar(double v) {
    Tensor t(1, 1);
    t.data_[0] = v;
    return t;
  }
  static Tensor row(std::initializer_list<double> vals) {
    Tensor t(1, static_cast<int64_t>(vals.size()));
    size_t i = 0;
    for (double v : vals) t.data_[i++] = v;
    return t;
  }

  int64_t rows() const { return rows_; }
  int64_t cols() const { return cols_; }
  int64_t numel() const { return rows_ * cols_; }
  bool empty() const { return data_.empty(); }

  double& operator()(int64_t r, int64_t c) {
    assert(r >= 0 && r < rows_ && c >= 0 && c < cols_);
    return data_[static_cast<size_t>(r * cols_ + c)];
  }
  double operator()(int64_t r, int64_t c) const {
    assert(r >= 0 && r < rows_ && c >= 0 && c < cols_);
    return data_[static_cast<size_t>(r * cols_ + c)];
  }
  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double item() const {
    assert(numel() == 1);
    return data_[0];
  }

  bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  Tensor reshaped(int64_t r, int64_t c) const {
    assert(r * c == numel());
    Tensor t = *this;
    t.rows_ = r;
    t.cols_ = c;
    return t;
  }

 private:
  int64_t rows_, cols_;
  std::vector<double> data_;
};

inline bool all_finite(const Tensor& t) {
  for (int64_t i = 0; i < t.numel(); ++i) {
    if (!std::isfinite(t[i])) return false;
  }
  return true;
}

}  // namespace pointcmp
