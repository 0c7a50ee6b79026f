#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

#include "trigact/errors.hpp"
#include "trigact/tensor.hpp"

namespace trigact {

/// (out x in) matrix of 1-D bilinear resampling with half-pixel centers
/// (the align_corners=false convention).
inline Eigen::MatrixXd bilinear_matrix(std::size_t in, std::size_t out) {
  if (in == 0 || out == 0) throw ContractError("bilinear_matrix: empty extent");
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(out, in);
  const double scale = double(in) / double(out);
  for (std::size_t o = 0; o < out; ++o) {
    const double src = std::max(0.0, (double(o) + 0.5) * scale - 0.5);
    const std::size_t i0 = std::min(in - 1, std::size_t(src));
    const std::size_t i1 = std::min(in - 1, i0 + 1);
    const double lambda = src - double(i0);
    m(o, i0) += 1.0 - lambda;
    m(o, i1) += lambda;
  }
  return m;
}

/// Per-channel linear map Y = rows * X * cols^T applied to every image.
struct SeparableMap {
  Eigen::MatrixXd rows;  // (H_out x H_in)
  Eigen::MatrixXd cols;  // (W_out x W_in)

  static SeparableMap identity(std::size_t h, std::size_t w) {
    return {Eigen::MatrixXd::Identity(h, h), Eigen::MatrixXd::Identity(w, w)};
  }
};

/// Resize (h, w) to (r_h, r_w), place at (top, left) on a zero canvas of
/// (canvas_h, canvas_w), resize back to (h, w).
inline SeparableMap resize_pad_map(std::size_t h, std::size_t w, std::size_t r_h, std::size_t r_w, std::size_t canvas_h,
                                   std::size_t canvas_w, std::size_t top, std::size_t left) {
  if (top + r_h > canvas_h || left + r_w > canvas_w) throw ContractError("resize_pad_map: placement exceeds canvas");
  auto axis = [](std::size_t n, std::size_t r, std::size_t canvas, std::size_t off) {
    Eigen::MatrixXd place = Eigen::MatrixXd::Zero(canvas, r);
    for (std::size_t i = 0; i < r; ++i) place(off + i, i) = 1.0;
    return Eigen::MatrixXd(bilinear_matrix(canvas, n) * place * bilinear_matrix(n, r));
  };
  return {axis(h, r_h, canvas_h, top), axis(w, r_w, canvas_w, left)};
}

template <typename T>
Tensor<T> apply_separable(const Tensor<T>& images, const SeparableMap& m, bool transpose = false) {
  const Shape& s = images.shape();
  const Eigen::MatrixXd& a = m.rows;
  const Eigen::MatrixXd& b = m.cols;
  const std::size_t in_h = transpose ? a.rows() : a.cols(), in_w = transpose ? b.rows() : b.cols();
  const std::size_t out_h = transpose ? a.cols() : a.rows(), out_w = transpose ? b.cols() : b.rows();
  if (s.h != in_h || s.w != in_w) throw ContractError("apply_separable: image extent mismatch");
  Tensor<T> out({s.n, s.c, out_h, out_w});
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  RowMat x(in_h, in_w), y;
  for (std::size_t p = 0; p < s.n * s.c; ++p) {
    const T* src = images.data() + p * in_h * in_w;
    for (std::size_t i = 0; i < in_h * in_w; ++i) x.data()[i] = double(src[i]);
    if (transpose) y = a.transpose() * x * b;
    else y = a * x * b.transpose();
    T* dst = out.data() + p * out_h * out_w;
    for (std::size_t i = 0; i < out_h * out_w; ++i) dst[i] = T(y.data()[i]);
  }
  return out;
}

/// Reflect index into [0, n) with period 2n (edge sample repeated: d c b a | a b c d).
inline std::size_t reflect_index(long i, std::size_t n) {
  const long period = 2 * long(n);
  long m = i % period;
  if (m < 0) m += period;
  return std::size_t(m < long(n) ? m : period - 1 - m);
}

}  // namespace trigact
