#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "dmil/domain.hpp"
#include "dmil/rng.hpp"

namespace dmil {

struct GenConfig {
  int n_images = 200;
  int image_width = 896;
  int image_height = 1344;
  int side = kDefaultSide;
  int stride = kDefaultStride;
  int feature_dim = 128;
  std::array<double, 4> class_mix = {0.25, 0.35, 0.25, 0.15};  // N, B, M, MB
  double separation = 4.0;  // class-mean distance in units of the noise std
  int lesion_min = 48;
  int lesion_max = 150;
  std::uint64_t seed = 0;
  double full_ratio = 0.0;  // fraction of malignant images tagged fully supervised
};

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void validate(const GenConfig& c) {
  if (c.n_images < 0) throw std::invalid_argument("n_images must be >= 0");
  if (c.feature_dim < 2) throw std::invalid_argument("feature_dim must be >= 2");
  double sum = 0.0;
  for (double p : c.class_mix) {
    if (p < 0.0) throw std::invalid_argument("class mix proportions must be >= 0");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("class mix must sum to 1");
  if (c.separation < 0.0) throw std::invalid_argument("separation must be >= 0");
  if (c.lesion_min < 1 || c.lesion_max < c.lesion_min)
    throw std::invalid_argument("bad lesion size range");
  if (c.lesion_max > c.image_width || c.lesion_max > c.image_height)
    throw std::invalid_argument("lesions larger than the image");
  if (!(c.full_ratio >= 0.0 && c.full_ratio <= 1.0))
    throw std::invalid_argument("full_ratio must lie in [0, 1]");
  (void)build_grid(c.image_width, c.image_height, c.side, c.stride);
}

namespace detail {

inline constexpr int kPlacementRetries = 1000;

inline Box place_lesion(const GenConfig& c, const std::vector<RegionGeometry>& grid, Rng& rng) {
  std::uniform_int_distribution<int> size(c.lesion_min, c.lesion_max);
  for (int attempt = 0; attempt < kPlacementRetries; ++attempt) {
    const int w = size(rng), h = size(rng);
    std::uniform_int_distribution<int> px(0, c.image_width - w), py(0, c.image_height - h);
    const int x = px(rng), y = py(rng);
    const Box box{double(x), double(y), double(x + w), double(y + h)};
    // Every lesion must be findable by at least one region.
    for (const auto& g : grid)
      if (iom(g.box(), box) >= kDefaultAlpha) return box;
  }
  throw GenerationError("could not place a lesion covered by any region");
}

}  // namespace detail

// Class-conditional isotropic features: background regions around 0, regions
// covering a lesion (IoM >= 0.5) around separation * e_0 (malignant) or
// separation * e_1 (benign); malignant wins when both apply.
inline std::vector<RegionBag> generate(const GenConfig& c) {
  validate(c);
  const auto grid = build_grid(c.image_width, c.image_height, c.side, c.stride);
  const int grid_cols = (c.image_width - c.side) / c.stride + 1;
  const int grid_rows = (c.image_height - c.side) / c.stride + 1;

  std::vector<RegionBag> bags;
  bags.reserve(std::size_t(c.n_images));
  for (int idx = 0; idx < c.n_images; ++idx) {
    Rng rng = make_rng(c.seed, "image", std::uint64_t(idx));
    std::discrete_distribution<int> pick(c.class_mix.begin(), c.class_mix.end());
    const auto cls = static_cast<ImageClass>(pick(rng));

    RegionBag bag;
    char id[32];
    std::snprintf(id, sizeof id, "img%05d", idx);
    bag.image_id = id;
    bag.grid_rows = grid_rows;
    bag.grid_cols = grid_cols;
    bag.geometry = grid;
    bag.weak_label = {cls == ImageClass::M || cls == ImageClass::MB,
                      cls == ImageClass::B || cls == ImageClass::MB};

    std::uniform_int_distribution<int> count(1, 3);
    if (bag.weak_label.y_M) {
      const int n = count(rng);
      for (int j = 0; j < n; ++j)
        bag.annotations.push_back({LesionClass::M, detail::place_lesion(c, grid, rng)});
    }
    if (bag.weak_label.y_B) {
      const int n = count(rng);
      for (int j = 0; j < n; ++j)
        bag.annotations.push_back({LesionClass::B, detail::place_lesion(c, grid, rng)});
    }

    bag.features = Matrix(grid.size(), std::size_t(c.feature_dim));
    std::normal_distribution<double> noise(0.0, 1.0);
    for (std::size_t i = 0; i < grid.size(); ++i) {
      const Box r = grid[i].box();
      bool m_hit = false, b_hit = false;
      for (const auto& a : bag.annotations) {
        if (iom(r, a.box) < kDefaultAlpha) continue;
        (a.cls == LesionClass::M ? m_hit : b_hit) = true;
      }
      auto row = bag.features.row(i);
      for (double& v : row) v = noise(rng);
      if (m_hit)
        row[0] += c.separation;
      else if (b_hit)
        row[1] += c.separation;
    }
    bags.push_back(std::move(bag));
  }

  // Exactly round(full_ratio * #malignant) malignant images become full.
  std::vector<std::size_t> malignant;
  for (std::size_t i = 0; i < bags.size(); ++i)
    if (bags[i].weak_label.y_M) malignant.push_back(i);
  Rng full_rng = make_rng(c.seed, "full");
  std::shuffle(malignant.begin(), malignant.end(), full_rng);
  const auto n_full = std::size_t(std::llround(c.full_ratio * double(malignant.size())));
  for (std::size_t j = 0; j < n_full; ++j) bags[malignant[j]].supervision = Supervision::Full;
  return bags;
}

// Keeps a seeded, nested fraction of the fully supervised bags: ratio r keeps
// the first round(r * count) of one fixed permutation, so larger ratios
// contain smaller ones.
inline std::vector<RegionBag> subsample_full(std::vector<RegionBag> bags, double ratio,
                                             std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw std::invalid_argument("ratio must lie in [0, 1]");
  std::vector<std::size_t> full;
  for (std::size_t i = 0; i < bags.size(); ++i)
    if (bags[i].supervision == Supervision::Full) full.push_back(i);
  Rng rng = make_rng(seed, "full-subsample");
  std::shuffle(full.begin(), full.end(), rng);
  const auto keep = std::size_t(std::llround(ratio * double(full.size())));
  for (std::size_t j = keep; j < full.size(); ++j) bags[full[j]].supervision = Supervision::Weak;
  return bags;
}

// ---------------------------------------------------------------------------
// Dataset text format
//
//   DMILDS v1 <feature_dim> <side> <stride>
//   IMG <id> <grid_rows> <grid_cols> <y_M> <y_B> <weak|full>
//   LES <M|B> <x_min> <y_min> <x_max> <y_max>        (zero or more)
//   <feature_dim floats>                              (grid_rows * grid_cols lines)

struct DatasetHeader {
  int feature_dim = 128;
  int side = kDefaultSide;
  int stride = kDefaultStride;
  friend bool operator==(const DatasetHeader&, const DatasetHeader&) = default;
};

struct Dataset {
  DatasetHeader header;
  std::vector<RegionBag> bags;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& image_id, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) +
                           (image_id.empty() ? "" : " (image " + image_id + ")") + ": " + what),
        line_(line),
        image_id_(image_id) {}
  std::size_t line() const { return line_; }
  const std::string& image_id() const { return image_id_; }

 private:
  std::size_t line_;
  std::string image_id_;
};

// Shortest decimal text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

inline bool parse_double(std::string_view s, double& out) {
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

inline DatasetHeader header_for(const GenConfig& c) {
  return {c.feature_dim, c.side, c.stride};
}

inline void write_dataset(std::ostream& os, const Dataset& ds) {
  os << "DMILDS v1 " << ds.header.feature_dim << ' ' << ds.header.side << ' ' << ds.header.stride
     << '\n';
  for (const auto& bag : ds.bags) {
    if (int(bag.feature_dim()) != ds.header.feature_dim)
      throw ShapeError("bag " + bag.image_id + " feature dimension differs from header");
    os << "IMG " << bag.image_id << ' ' << bag.grid_rows << ' ' << bag.grid_cols << ' '
       << bag.weak_label.y_M << ' ' << bag.weak_label.y_B << ' '
       << (bag.supervision == Supervision::Full ? "full" : "weak") << '\n';
    for (const auto& a : bag.annotations)
      os << "LES " << (a.cls == LesionClass::M ? 'M' : 'B') << ' ' << format_double(a.box.x_min)
         << ' ' << format_double(a.box.y_min) << ' ' << format_double(a.box.x_max) << ' '
         << format_double(a.box.y_max) << '\n';
    for (std::size_t i = 0; i < bag.m(); ++i) {
      auto row = bag.features.row(i);
      for (std::size_t j = 0; j < row.size(); ++j) {
        if (j) os << ' ';
        os << format_double(row[j]);
      }
      os << '\n';
    }
  }
  if (!os) throw std::runtime_error("dataset write failed");
}

inline Dataset read_dataset(std::istream& is) {
  Dataset ds;
  std::string line;
  std::size_t line_no = 0;
  auto next = [&]() -> bool {
    if (!std::getline(is, line)) return false;
    ++line_no;
    return true;
  };
  auto as_int = [&](std::string_view tok, const std::string& id, const char* what) {
    int v = 0;
    auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || ptr != tok.data() + tok.size())
      throw ParseError(line_no, id, std::string("bad ") + what + " '" + std::string(tok) + "'");
    return v;
  };

  if (!next()) throw ParseError(0, "", "empty file");
  {
    const auto tok = split_ws(line);
    if (tok.size() != 5 || tok[0] != "DMILDS" || tok[1] != "v1")
      throw ParseError(line_no, "", "bad header");
    ds.header.feature_dim = as_int(tok[2], "", "feature_dim");
    ds.header.side = as_int(tok[3], "", "side");
    ds.header.stride = as_int(tok[4], "", "stride");
    if (ds.header.feature_dim < 1 || ds.header.side < 1 || ds.header.stride < 1)
      throw ParseError(line_no, "", "non-positive header value");
  }

  bool have = next();
  while (have) {
    const auto tok = split_ws(line);
    if (tok.empty()) {
      have = next();
      continue;
    }
    if (tok[0] != "IMG" || tok.size() != 7) throw ParseError(line_no, "", "expected IMG record");
    RegionBag bag;
    bag.image_id = std::string(tok[1]);
    const std::string& id = bag.image_id;
    bag.grid_rows = as_int(tok[2], id, "grid_rows");
    bag.grid_cols = as_int(tok[3], id, "grid_cols");
    bag.weak_label.y_M = as_int(tok[4], id, "y_M");
    bag.weak_label.y_B = as_int(tok[5], id, "y_B");
    if (bag.grid_rows < 1 || bag.grid_cols < 1) throw ParseError(line_no, id, "empty grid");
    if ((bag.weak_label.y_M | bag.weak_label.y_B) > 1 || bag.weak_label.y_M < 0 ||
        bag.weak_label.y_B < 0)
      throw ParseError(line_no, id, "weak labels must be 0 or 1");
    if (tok[6] == "full")
      bag.supervision = Supervision::Full;
    else if (tok[6] == "weak")
      bag.supervision = Supervision::Weak;
    else
      throw ParseError(line_no, id, "bad supervision '" + std::string(tok[6]) + "'");

    have = next();
    while (have) {
      const auto les = split_ws(line);
      if (les.empty() || les[0] != "LES") break;
      if (les.size() != 6 || (les[1] != "M" && les[1] != "B"))
        throw ParseError(line_no, id, "bad LES record");
      LesionAnnotation a;
      a.cls = les[1] == "M" ? LesionClass::M : LesionClass::B;
      double* coords[4] = {&a.box.x_min, &a.box.y_min, &a.box.x_max, &a.box.y_max};
      for (int j = 0; j < 4; ++j)
        if (!parse_double(les[2 + j], *coords[j])) throw ParseError(line_no, id, "bad LES coordinate");
      if (!(a.box.x_max > a.box.x_min && a.box.y_max > a.box.y_min))
        throw ParseError(line_no, id, "degenerate lesion box");
      bag.annotations.push_back(a);
      have = next();
    }

    const std::size_t m = std::size_t(bag.grid_rows) * std::size_t(bag.grid_cols);
    const std::size_t d = std::size_t(ds.header.feature_dim);
    bag.features = Matrix(m, d);
    for (std::size_t i = 0; i < m; ++i) {
      if (!have) throw ParseError(line_no, id, "file ends before all feature rows");
      const auto vals = split_ws(line);
      if (vals.size() != d)
        throw ParseError(line_no, id,
                         "feature row " + std::to_string(i) + " has " +
                             std::to_string(vals.size()) + " values, expected " +
                             std::to_string(d));
      for (std::size_t j = 0; j < d; ++j)
        if (!parse_double(vals[j], bag.features(i, j)) || !std::isfinite(bag.features(i, j)))
          throw ParseError(line_no, id, "bad feature value '" + std::string(vals[j]) + "'");
      have = next();
    }
    bag.geometry.reserve(m);
    for (int r = 0; r < bag.grid_rows; ++r)
      for (int c = 0; c < bag.grid_cols; ++c)
        bag.geometry.push_back(
            {r, c, c * ds.header.stride, r * ds.header.stride, ds.header.side});
    ds.bags.push_back(std::move(bag));
  }
  return ds;
}

inline void write_dataset_file(const std::string& path, const Dataset& ds) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_dataset(os, ds);
}

inline Dataset read_dataset_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  return read_dataset(is);
}

}  // namespace dmil
