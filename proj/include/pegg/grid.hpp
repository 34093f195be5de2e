#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <vector>

#include <opencv2/core.hpp>

#include "pegg/errors.hpp"

namespace pegg {

namespace detail {
template <typename T>
struct CvDepth;
template <>
struct CvDepth<float> {
  static constexpr int value = CV_32F;
};
template <>
struct CvDepth<double> {
  static constexpr int value = CV_64F;
};
template <>
struct CvDepth<unsigned char> {
  static constexpr int value = CV_8U;
};
}  // namespace detail

/// Dense row-major 2-D array with value semantics.
///
/// `channels` interleaves per pixel (HWC), so an RGB image is
/// `Grid<unsigned char>(h, w, 3)`. `view()` exposes the buffer to OpenCV
/// without copying; the header must not outlive the grid.
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(int rows, int cols, int channels = 1, T fill = T{})
      : rows_(rows), cols_(cols), channels_(channels),
        data_(static_cast<std::size_t>(rows) * cols * channels, fill) {
    if (rows < 0 || cols < 0 || channels < 1) throw ShapeError("Grid: negative size");
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  int channels() const { return channels_; }
  bool empty() const { return data_.empty(); }
  std::size_t size() const { return data_.size(); }

  T& operator()(int r, int c, int ch = 0) { return data_[index(r, c, ch)]; }
  const T& operator()(int r, int c, int ch = 0) const { return data_[index(r, c, ch)]; }

  bool contains(int r, int c) const { return r >= 0 && c >= 0 && r < rows_ && c < cols_; }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  bool same_shape(const Grid& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_ && channels_ == other.channels_;
  }

  cv::Mat view() { return cv::Mat(rows_, cols_, CV_MAKETYPE(detail::CvDepth<T>::value, channels_), data_.data()); }
  cv::Mat view() const {
    return cv::Mat(rows_, cols_, CV_MAKETYPE(detail::CvDepth<T>::value, channels_), const_cast<T*>(data_.data()));
  }

  static Grid from_mat(const cv::Mat& mat) {
    cv::Mat converted;
    const int type = CV_MAKETYPE(detail::CvDepth<T>::value, mat.channels());
    if (mat.type() != type) {
      mat.convertTo(converted, type);
    } else {
      converted = mat;
    }
    Grid out(converted.rows, converted.cols, converted.channels());
    converted.copyTo(out.view());
    return out;
  }

  bool operator==(const Grid& other) const = default;

 private:
  std::size_t index(int r, int c, int ch) const {
    return (static_cast<std::size_t>(r) * cols_ + c) * channels_ + ch;
  }

  int rows_ = 0;
  int cols_ = 0;
  int channels_ = 1;
  std::vector<T> data_;
};

using Plane = Grid<float>;
using RgbImage = Grid<unsigned char>;

}  // namespace pegg
