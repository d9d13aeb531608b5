#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmil/matrix.hpp"

namespace dmil {

class EmptyGridError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class GeometryError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

inline constexpr int kDefaultSide = 224;
inline constexpr int kDefaultStride = 112;
inline constexpr double kDefaultAlpha = 0.5;

// Half-open axis-aligned rectangle [x_min, x_max) x [y_min, y_max), pixels.
struct Box {
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const {
    return width() > 0 && height() > 0 ? width() * height() : 0.0;
  }
  friend bool operator==(const Box&, const Box&) = default;
};

inline double intersection_area(const Box& a, const Box& b) {
  const double w = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double h = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  return (w > 0 && h > 0) ? w * h : 0.0;
}

struct RegionGeometry {
  int row_index = 0;
  int col_index = 0;
  int x0 = 0;
  int y0 = 0;
  int side = kDefaultSide;

  Box box() const {
    return {double(x0), double(y0), double(x0 + side), double(y0 + side)};
  }
  friend bool operator==(const RegionGeometry&, const RegionGeometry&) = default;
};

struct WeakLabel {
  int y_M = 0;
  int y_B = 0;
  friend bool operator==(const WeakLabel&, const WeakLabel&) = default;
};

enum class LesionClass { M, B };

struct LesionAnnotation {
  LesionClass cls = LesionClass::M;
  Box box;
  friend bool operator==(const LesionAnnotation&, const LesionAnnotation&) = default;
};

enum class RegionLabel { M, BN, Ignored };

enum class Supervision { Weak, Full };

// Image-level class used for reporting; derived from the weak label.
enum class ImageClass { N, B, M, MB };

inline ImageClass image_class(const WeakLabel& y) {
  if (y.y_M && y.y_B) return ImageClass::MB;
  if (y.y_M) return ImageClass::M;
  if (y.y_B) return ImageClass::B;
  return ImageClass::N;
}

inline const char* to_string(ImageClass c) {
  switch (c) {
    case ImageClass::N: return "N";
    case ImageClass::B: return "B";
    case ImageClass::M: return "M";
    case ImageClass::MB: return "MB";
  }
  return "?";
}

// One image as a multiple-instance bag of region feature vectors.
struct RegionBag {
  std::string image_id;
  int grid_rows = 0;
  int grid_cols = 0;
  Matrix features;  // m x D
  std::vector<RegionGeometry> geometry;
  WeakLabel weak_label;
  std::vector<LesionAnnotation> annotations;
  Supervision supervision = Supervision::Weak;

  std::size_t m() const { return features.rows(); }
  std::size_t feature_dim() const { return features.cols(); }
  friend bool operator==(const RegionBag&, const RegionBag&) = default;
};

inline void validate(const RegionBag& bag) {
  if (bag.m() == 0) throw std::invalid_argument("bag " + bag.image_id + ": no regions");
  if (bag.geometry.size() != bag.m())
    throw std::invalid_argument("bag " + bag.image_id + ": geometry/feature count mismatch");
  for (double v : bag.features.data())
    if (!std::isfinite(v))
      throw std::invalid_argument("bag " + bag.image_id + ": non-finite feature");
}

// All square windows that fit in the image, row-major.
inline std::vector<RegionGeometry> build_grid(int image_width, int image_height,
                                              int side = kDefaultSide,
                                              int stride = kDefaultStride) {
  if (side <= 0 || stride <= 0) throw std::invalid_argument("side and stride must be positive");
  if (image_width < side || image_height < side)
    throw EmptyGridError("image " + std::to_string(image_width) + "x" +
                         std::to_string(image_height) + " smaller than region side " +
                         std::to_string(side));
  const int cols = (image_width - side) / stride + 1;
  const int rows = (image_height - side) / stride + 1;
  std::vector<RegionGeometry> grid;
  grid.reserve(std::size_t(rows) * std::size_t(cols));
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) grid.push_back({r, c, c * stride, r * stride, side});
  return grid;
}

// Intersection over the smaller of the two areas.
inline double iom(const Box& region, const Box& lesion) {
  const double ra = region.area();
  const double la = lesion.area();
  if (ra <= 0 || la <= 0) throw GeometryError("iom: zero-area rectangle");
  return intersection_area(region, lesion) / std::min(ra, la);
}

namespace instrumentation {
// Counts label_regions invocations; lets tests prove a code path never
// touches local annotations.
inline std::atomic<std::size_t>& label_region_calls() {
  static std::atomic<std::size_t> calls{0};
  return calls;
}
}  // namespace instrumentation

// Region labels from malignant annotations. Benign boxes never yield M.
// A region hitting IoM >= alpha with any malignant lesion is M even if it
// also overlaps another lesion partially.
inline std::vector<RegionLabel> label_regions(const RegionBag& bag, double alpha = kDefaultAlpha) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in (0, 1]");
  if (bag.supervision != Supervision::Full)
    throw std::invalid_argument("label_regions: bag " + bag.image_id + " is not fully supervised");
  instrumentation::label_region_calls().fetch_add(1, std::memory_order_relaxed);

  std::vector<RegionLabel> labels(bag.geometry.size(), RegionLabel::BN);
  for (std::size_t i = 0; i < bag.geometry.size(); ++i) {
    const Box r = bag.geometry[i].box();
    bool touches = false;
    bool hit = false;
    for (const auto& a : bag.annotations) {
      if (a.cls != LesionClass::M) continue;
      if (intersection_area(r, a.box) > 0) touches = true;
      if (iom(r, a.box) >= alpha) {
        hit = true;
        break;
      }
    }
    labels[i] = hit ? RegionLabel::M : (touches ? RegionLabel::Ignored : RegionLabel::BN);
  }
  return labels;
}

}  // namespace dmil
