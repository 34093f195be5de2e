#include "pegg/datasets.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <deque>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <regex>
#include <set>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "pegg/errors.hpp"
#include "pegg/log.hpp"

namespace fs = std::filesystem;

namespace pegg {

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

// strtod-based so that "NaN" tokens parse (and are then rejected as non-finite).
std::vector<double> parse_numbers(std::string_view line, char sep) {
  std::vector<double> out;
  std::string buf(line);
  if (sep != ' ') std::replace(buf.begin(), buf.end(), sep, ' ');
  const char* p = buf.c_str();
  while (*p) {
    while (*p && std::isspace(static_cast<unsigned char>(*p))) ++p;
    if (!*p) break;
    char* end = nullptr;
    const double x = std::strtod(p, &end);
    if (end == p) throw ParseError("unparseable token in \"" + std::string(line) + "\"");
    out.push_back(x);
    p = end;
  }
  return out;
}

RgbImage read_rgb(const fs::path& path) {
  const cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw IoError("cannot read image " + path.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  return RgbImage::from_mat(rgb);
}

// Non-finite values become 0 (invalid). Millimeter data is rescaled to meters.
Plane sanitize_depth(Plane depth) {
  std::vector<float> valid;
  for (float& d : depth.values()) {
    if (!std::isfinite(d) || d < 0.0f) d = 0.0f;
    if (d > 0.0f) valid.push_back(d);
  }
  if (!valid.empty()) {
    std::nth_element(valid.begin(), valid.begin() + valid.size() / 2, valid.end());
    if (valid[valid.size() / 2] > 10.0f) {
      for (float& d : depth.values()) d *= 0.001f;
    }
  }
  return depth;
}

std::optional<Plane> read_depth_tiff(const fs::path& path) {
  const cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED | cv::IMREAD_ANYDEPTH);
  if (m.empty() || m.channels() != 1) return std::nullopt;
  return sanitize_depth(Plane::from_mat(m));
}

bool inside(const Vec2& p, int rows, int cols) {
  return p.x() >= 0.0 && p.y() >= 0.0 && p.x() < cols && p.y() < rows;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Image number -> object id, from Cornell's "z.txt" ("<image> <object> <name...>").
std::map<int, std::string> read_cornell_object_index(const fs::path& root) {
  std::map<int, std::string> index;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (!entry.is_regular_file() || entry.path().filename() != "z.txt") continue;
    std::ifstream in(entry.path());
    std::string line;
    while (std::getline(in, line)) {
      std::istringstream ls(line);
      int image = 0;
      std::string object;
      if (ls >> image >> object) index[image] = object;
    }
  }
  return index;
}

}  // namespace

int channel_count(Modality m) {
  switch (m) {
    case Modality::Depth: return 1;
    case Modality::Rgb: return 3;
    case Modality::RgbDepth: return 4;
  }
  return 0;
}

Modality parse_modality(std::string_view s) {
  const std::string l = lower(s);
  if (l == "d" || l == "depth") return Modality::Depth;
  if (l == "rgb") return Modality::Rgb;
  if (l == "rgbd" || l == "rgb-d") return Modality::RgbDepth;
  throw ConfigError("unknown modality \"" + std::string(s) + "\" (expected d, rgb or rgbd)");
}

std::string to_string(Modality m) {
  switch (m) {
    case Modality::Depth: return "d";
    case Modality::Rgb: return "rgb";
    case Modality::RgbDepth: return "rgbd";
  }
  return "?";
}

SplitMode parse_split_mode(std::string_view s) {
  const std::string l = lower(s);
  if (l == "image-wise" || l == "image") return SplitMode::ImageWise;
  if (l == "object-wise" || l == "object") return SplitMode::ObjectWise;
  throw ConfigError("unknown split mode \"" + std::string(s) + "\" (expected image-wise or object-wise)");
}

std::string to_string(SplitMode m) { return m == SplitMode::ImageWise ? "image-wise" : "object-wise"; }

std::vector<GraspRectangle> parse_cornell_annotations(std::istream& in, int* skipped) {
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!trim(line).empty()) lines.push_back(line);
  }
  int bad = 0;
  std::vector<GraspRectangle> rects;
  for (std::size_t i = 0; i + 4 <= lines.size(); i += 4) {
    try {
      std::array<Vec2, 4> corners;
      for (int k = 0; k < 4; ++k) {
        const auto xs = parse_numbers(lines[i + k], ' ');
        if (xs.size() != 2) throw ParseError("expected 2 values per corner line");
        corners[k] = Vec2(xs[0], xs[1]);
      }
      rects.push_back(grasp_from_rect(corners));
    } catch (const ParseError&) {
      ++bad;
    }
  }
  if (lines.size() % 4 != 0) ++bad;
  if (skipped) *skipped = bad;
  return rects;
}

GraspRectangle parse_jacquard_line(std::string_view line) {
  const auto xs = parse_numbers(trim(line), ';');
  if (xs.size() != 5) throw ParseError("jacquard grasp line needs 5 fields: \"" + std::string(line) + "\"");
  for (double x : xs) {
    if (!std::isfinite(x)) throw ParseError("non-finite field in \"" + std::string(line) + "\"");
  }
  if (xs[3] < 0 || xs[4] < 0) throw ParseError("negative extent in \"" + std::string(line) + "\"");
  return GraspRectangle({xs[0], xs[1]}, deg2rad(xs[2]), xs[3], xs[4]);
}

Plane depth_from_pcd(std::istream& in, int rows, int cols) {
  Plane depth(rows, cols);
  std::string line;
  bool in_header = false;
  bool first = true;
  while (std::getline(in, line)) {
    const std::string_view t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    if (first) {
      first = false;
      in_header = std::isalpha(static_cast<unsigned char>(t.front())) != 0;
    }
    if (in_header) {
      if (t.rfind("DATA", 0) == 0) in_header = false;
      continue;
    }
    const auto xs = parse_numbers(t, ' ');
    if (xs.size() < 5) throw ParseError("point cloud line needs x y z rgb index");
    const long idx = std::lround(xs[4]);
    if (idx < 0 || idx >= static_cast<long>(rows) * cols) continue;
    const double z = xs[2];
    if (std::isfinite(z) && z > 0.0) depth(static_cast<int>(idx / cols), static_cast<int>(idx % cols)) = static_cast<float>(z);
  }
  return sanitize_depth(std::move(depth));
}

cv::Point center_crop_origin(int rows, int cols, int crop_size) {
  if (crop_size <= 0 || crop_size > rows || crop_size > cols) {
    throw ConfigError("crop size " + std::to_string(crop_size) + " does not fit a " + std::to_string(cols) + "x" +
                      std::to_string(rows) + " image");
  }
  return {(cols - crop_size) / 2, (rows - crop_size) / 2};
}

GraspSample center_crop(const GraspSample& sample, int crop_size) {
  const cv::Point o = center_crop_origin(sample.rows(), sample.cols(), crop_size);
  const cv::Rect roi(o.x, o.y, crop_size, crop_size);
  GraspSample out;
  out.id = sample.id;
  out.object_id = sample.object_id;
  out.rgb = RgbImage::from_mat(sample.rgb.view()(roi));
  out.depth = Plane::from_mat(sample.depth.view()(roi));
  const Vec2 shift(-o.x, -o.y);
  for (const auto& r : sample.rectangles) {
    auto moved = r.translated(shift);
    if (inside(moved.center(), crop_size, crop_size)) out.rectangles.push_back(moved);
  }
  return out;
}

std::vector<GraspSample> load_cornell(const fs::path& root, int crop_size) {
  if (!fs::is_directory(root)) throw IoError("dataset root is not a directory: " + root.string());
  const std::regex rgb_name(R"(pcd(\d+)r\.png)");
  std::vector<std::pair<fs::path, std::string>> images;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    std::smatch m;
    const std::string name = entry.path().filename().string();
    if (entry.is_regular_file() && std::regex_match(name, m, rgb_name)) images.emplace_back(entry.path(), m[1].str());
  }
  std::sort(images.begin(), images.end());
  const auto objects = read_cornell_object_index(root);

  std::vector<GraspSample> samples;
  for (const auto& [rgb_path, number] : images) {
    const fs::path dir = rgb_path.parent_path();
    const fs::path ann = dir / ("pcd" + number + "cpos.txt");
    if (!fs::exists(ann)) {
      log::warn("skipping pcd" + number + ": missing annotation file");
      continue;
    }
    GraspSample s;
    s.id = "pcd" + number;
    try {
      s.rgb = read_rgb(rgb_path);
    } catch (const IoError& e) {
      log::warn(std::string("skipping ") + s.id + ": " + e.what());
      continue;
    }
    const fs::path tiff = dir / ("pcd" + number + "d.tiff");
    const fs::path pcd = dir / ("pcd" + number + ".txt");
    if (auto d = fs::exists(tiff) ? read_depth_tiff(tiff) : std::nullopt) {
      s.depth = std::move(*d);
    } else if (fs::exists(pcd)) {
      std::ifstream in(pcd);
      try {
        s.depth = depth_from_pcd(in, s.rgb.rows(), s.rgb.cols());
      } catch (const ParseError& e) {
        log::warn(std::string("skipping ") + s.id + ": " + e.what());
        continue;
      }
    } else {
      log::warn("skipping " + s.id + ": no readable depth");
      continue;
    }
    if (!s.depth.same_shape(Plane(s.rgb.rows(), s.rgb.cols()))) {
      log::warn("skipping " + s.id + ": depth and rgb sizes differ");
      continue;
    }
    std::ifstream in(ann);
    int skipped = 0;
    s.rectangles = parse_cornell_annotations(in, &skipped);
    if (skipped > 0) log::warn(s.id + ": skipped " + std::to_string(skipped) + " malformed rectangle(s)");
    if (auto it = objects.find(std::stoi(number)); it != objects.end()) s.object_id = it->second;

    GraspSample cropped = center_crop(s, crop_size);
    if (cropped.rectangles.empty()) {
      log::warn("skipping " + s.id + ": no rectangle inside the crop");
      continue;
    }
    samples.push_back(std::move(cropped));
  }
  return samples;
}

std::vector<GraspSample> load_jacquard(const fs::path& root, int crop_size) {
  if (!fs::is_directory(root)) throw IoError("dataset root is not a directory: " + root.string());
  if (crop_size <= 0) throw ConfigError("crop size must be positive");
  const std::string suffix = "_grasps.txt";
  std::vector<fs::path> grasp_files;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    const std::string name = entry.path().filename().string();
    if (entry.is_regular_file() && name.size() > suffix.size() &&
        name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
      grasp_files.push_back(entry.path());
    }
  }
  std::sort(grasp_files.begin(), grasp_files.end());

  std::vector<GraspSample> samples;
  for (const auto& gpath : grasp_files) {
    const std::string name = gpath.filename().string();
    const std::string id = name.substr(0, name.size() - suffix.size());
    const fs::path dir = gpath.parent_path();

    std::vector<GraspRectangle> rects;
    {
      std::ifstream in(gpath);
      std::string line;
      int bad = 0;
      while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        try {
          rects.push_back(parse_jacquard_line(line));
        } catch (const ParseError&) {
          ++bad;
        }
      }
      if (bad > 0) log::warn(id + ": skipped " + std::to_string(bad) + " malformed grasp line(s)");
    }
    if (rects.empty()) {
      log::warn("skipping " + id + ": no grasps");
      continue;
    }
    auto depth = read_depth_tiff(dir / (id + "_perfect_depth.tiff"));
    if (!depth) {
      log::warn("skipping " + id + ": unreadable depth");
      continue;
    }
    GraspSample s;
    s.id = id;
    try {
      s.rgb = read_rgb(dir / (id + "_RGB.png"));
    } catch (const IoError& e) {
      log::warn(std::string("skipping ") + id + ": " + e.what());
      continue;
    }
    if (depth->rows() != s.rgb.rows() || depth->cols() != s.rgb.cols()) {
      log::warn("skipping " + id + ": depth and rgb sizes differ");
      continue;
    }
    const auto underscore = id.find('_');
    s.object_id = underscore == std::string::npos ? dir.filename().string() : id.substr(underscore + 1);

    // Square center crop, then resample to crop_size.
    const int side = std::min(s.rgb.rows(), s.rgb.cols());
    const cv::Point o = center_crop_origin(s.rgb.rows(), s.rgb.cols(), side);
    const cv::Rect roi(o.x, o.y, side, side);
    const double scale = static_cast<double>(crop_size) / side;
    cv::Mat rgb, dep;
    cv::resize(s.rgb.view()(roi), rgb, cv::Size(crop_size, crop_size), 0, 0,
               scale < 1.0 ? cv::INTER_AREA : cv::INTER_LINEAR);
    cv::resize(depth->view()(roi), dep, cv::Size(crop_size, crop_size), 0, 0, cv::INTER_NEAREST);
    s.rgb = RgbImage::from_mat(rgb);
    s.depth = Plane::from_mat(dep);
    for (const auto& r : rects) {
      const Vec2 c = (r.center() - Vec2(o.x, o.y)) * scale;
      if (inside(c, crop_size, crop_size)) s.rectangles.emplace_back(c, r.angle(), r.width() * scale, r.height() * scale);
    }
    if (s.rectangles.empty()) {
      log::warn("skipping " + id + ": no grasp inside the crop");
      continue;
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

GroundTruthMaps rasterize_labels(std::span<const GraspRectangle> rects, int rows, int cols, double width_scale) {
  if (!(width_scale > 0.0)) throw std::invalid_argument("rasterize_labels: width_scale must be > 0");
  GroundTruthMaps maps(rows, cols, width_scale);
  for (const auto& rect : rects) {
    const GraspRectangle band(rect.center(), rect.angle(), rect.width() / 3.0, rect.height());
    const auto s = static_cast<float>(std::sin(2.0 * rect.angle()));
    const auto c = static_cast<float>(std::cos(2.0 * rect.angle()));
    const auto w = static_cast<float>(std::min(rect.width() / width_scale, 1.0));
    for_each_pixel(band, rows, cols, [&](int r, int col) {
      maps.quality(r, col) = 1.0f;
      maps.angle_sin(r, col) = s;
      maps.angle_cos(r, col) = c;
      maps.width(r, col) = w;
    });
  }
  return maps;
}

AugmentParams sample_augmentation(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> zoom(0.5, 1.0);
  std::uniform_real_distribution<double> shift(-50.0, 50.0);
  AugmentParams p;
  p.zoom = zoom(rng);
  const double du = shift(rng);
  const double dv = shift(rng);
  p.jitter = Vec2(du, dv);
  return p;
}

cv::Matx23d augmentation_affine(const AugmentParams& p, int rows, int cols) {
  if (!(p.zoom > 0.0)) throw std::invalid_argument("augmentation zoom must be > 0");
  const double cu = (cols - 1) / 2.0;
  const double cv_ = (rows - 1) / 2.0;
  const double s = 1.0 / p.zoom;
  return {s, 0.0, cu - (cu + p.jitter.x()) * s, 0.0, s, cv_ - (cv_ + p.jitter.y()) * s};
}

std::optional<GraspSample> apply_augmentation(const GraspSample& sample, const AugmentParams& p) {
  if (p.identity()) return sample;
  const int rows = sample.rows();
  const int cols = sample.cols();
  const cv::Matx23d m = augmentation_affine(p, rows, cols);

  GraspSample out;
  out.id = sample.id;
  out.object_id = sample.object_id;
  for (const auto& r : sample.rectangles) {
    const Vec2 c(m(0, 0) * r.center().x() + m(0, 2), m(1, 1) * r.center().y() + m(1, 2));
    if (inside(c, rows, cols)) out.rectangles.emplace_back(c, r.angle(), r.width() / p.zoom, r.height() / p.zoom);
  }
  if (out.rectangles.empty()) return std::nullopt;

  cv::Mat rgb, dep;
  cv::warpAffine(sample.rgb.view(), rgb, cv::Mat(m), cv::Size(cols, rows), cv::INTER_LINEAR, cv::BORDER_REPLICATE);
  cv::warpAffine(sample.depth.view(), dep, cv::Mat(m), cv::Size(cols, rows), cv::INTER_NEAREST, cv::BORDER_REPLICATE);
  out.rgb = RgbImage::from_mat(rgb);
  out.depth = Plane::from_mat(dep);
  return out;
}

GraspSample augment(const GraspSample& sample, std::uint64_t seed) {
  std::uint64_t s = seed;
  for (int attempt = 0; attempt < 10; ++attempt) {
    if (auto out = apply_augmentation(sample, sample_augmentation(s))) return std::move(*out);
    s = splitmix64(s);
  }
  return sample;
}

Plane inpaint_depth(const Plane& depth) {
  Plane out = depth;
  const int rows = depth.rows(), cols = depth.cols();
  std::vector<char> seen(depth.size(), 0);
  std::deque<std::pair<int, int>> queue;
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      if (depth(r, c) > 0.0f) {
        seen[static_cast<std::size_t>(r) * cols + c] = 1;
        queue.emplace_back(r, c);
      }
    }
  }
  if (queue.empty()) throw InvalidSampleError("depth plane has no valid pixel");
  constexpr int dr[4] = {-1, 0, 0, 1};
  constexpr int dc[4] = {0, -1, 1, 0};
  while (!queue.empty()) {
    const auto [r, c] = queue.front();
    queue.pop_front();
    for (int k = 0; k < 4; ++k) {
      const int nr = r + dr[k], nc = c + dc[k];
      if (!out.contains(nr, nc)) continue;
      auto& flag = seen[static_cast<std::size_t>(nr) * cols + nc];
      if (flag) continue;
      flag = 1;
      out(nr, nc) = out(r, c);
      queue.emplace_back(nr, nc);
    }
  }
  return out;
}

std::vector<Plane> normalize_inputs(const GraspSample& sample, Modality modality) {
  std::vector<Plane> planes;
  const int rows = sample.rows(), cols = sample.cols();
  if (modality != Modality::Rgb) {
    Plane d = inpaint_depth(sample.depth);
    const double mean =
        std::accumulate(d.values().begin(), d.values().end(), 0.0) / static_cast<double>(d.size());
    for (float& x : d.values()) x = static_cast<float>(std::clamp(x - mean, -1.0, 1.0));
    planes.push_back(std::move(d));
  }
  if (modality != Modality::Depth) {
    if (sample.rgb.rows() != rows || sample.rgb.cols() != cols || sample.rgb.channels() != 3) {
      throw InvalidSampleError("rgb image does not match the depth plane");
    }
    for (int ch = 0; ch < 3; ++ch) {
      Plane p(rows, cols);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) p(r, c) = sample.rgb(r, c, ch) / 255.0f - 0.5f;
      planes.push_back(std::move(p));
    }
  }
  return planes;
}

SplitIndices split(std::span<const GraspSample> samples, SplitMode mode, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ConfigError("train_fraction must lie in (0, 1)");
  }
  std::mt19937_64 rng(seed);
  SplitIndices out;
  if (mode == SplitMode::ImageWise) {
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(order.size())));
    out.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    out.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
    return out;
  }

  std::set<std::string> ids;
  for (const auto& s : samples) {
    if (s.object_id.empty()) throw ConfigError("object-wise split requires an object id for every sample (" + s.id + ")");
    ids.insert(s.object_id);
  }
  std::vector<std::string> objects(ids.begin(), ids.end());
  std::shuffle(objects.begin(), objects.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(objects.size())));
  const std::set<std::string> train_objects(objects.begin(), objects.begin() + static_cast<std::ptrdiff_t>(n_train));
  for (std::size_t i = 0; i < samples.size(); ++i) {
    (train_objects.count(samples[i].object_id) ? out.train : out.val).push_back(i);
  }
  return out;
}

}  // namespace pegg
