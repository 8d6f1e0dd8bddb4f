#include "dermagan/dataset.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numbers>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "dermagan/archive.hpp"
#include "dermagan/error.hpp"

namespace dermagan {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

Split parse_split(std::string_view text) {
  if (text == "train") return Split::train;
  if (text == "val") return Split::val;
  if (text == "test") return Split::test;
  throw InvalidArgument("unknown split '" + std::string(text) + "'");
}

std::vector<ManifestEntry> DatasetManifest::entries_in(Split split) const {
  std::vector<ManifestEntry> out;
  std::copy_if(entries.begin(), entries.end(), std::back_inserter(out),
               [&](const ManifestEntry& e) { return e.split == split; });
  return out;
}

std::size_t DatasetManifest::count(Split split) const {
  return static_cast<std::size_t>(std::count_if(
      entries.begin(), entries.end(), [&](const ManifestEntry& e) { return e.split == split; }));
}

fs::path DatasetManifest::resolve(const ManifestEntry& entry) const { return root / entry.path; }

ImageTensor DatasetManifest::load_image(const ManifestEntry& entry) const {
  return standardize(read_png(resolve(entry), entry.path), resolution);
}

void DatasetManifest::save(const fs::path& file) const {
  const auto dir = fs::absolute(file).parent_path();
  std::ostringstream out;
  out << json{{"class_names", class_names}, {"resolution", resolution}}.dump() << '\n';
  for (const auto& e : entries) {
    auto rel = fs::absolute(root / e.path).lexically_normal().lexically_relative(dir);
    out << json{{"path", rel.generic_string()}, {"label", e.label}, {"split", to_string(e.split)}}
               .dump()
        << '\n';
  }
  atomic_write(file, out.str());
}

void validate_manifest(const DatasetManifest& m, bool check_files) {
  if (m.class_names.empty()) throw InvalidArgument("manifest: no classes");
  const bool pow2 = m.resolution > 0 && (m.resolution & (m.resolution - 1)) == 0;
  if (!pow2 || m.resolution < 32 || m.resolution > 1024)
    throw InvalidArgument("manifest: resolution must be a power of two in [32, 1024]");
  std::set<std::string> seen;
  for (const auto& e : m.entries) {
    if (e.label < 0 || e.label >= m.num_classes())
      throw InvalidArgument("manifest: label " + std::to_string(e.label) + " out of range for '" +
                            e.path + "'");
    if (!seen.insert(fs::path(e.path).lexically_normal().generic_string()).second)
      throw InvalidArgument("manifest: overlapping splits, '" + e.path + "' listed twice");
    if (check_files && !fs::is_regular_file(m.resolve(e)))
      throw InvalidArgument("manifest: unresolved path '" + e.path + "'");
  }
}

DatasetManifest load_manifest(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("manifest: missing file " + file.string());
  DatasetManifest m;
  m.root = fs::absolute(file).parent_path();
  std::string line;
  int lineno = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& ex) {
      throw InvalidArgument("manifest: malformed entry at line " + std::to_string(lineno) + ": " +
                            ex.what());
    }
    try {
      if (!have_header) {
        m.class_names = rec.at("class_names").get<std::vector<std::string>>();
        m.resolution = rec.at("resolution").get<int>();
        have_header = true;
        continue;
      }
      ManifestEntry e;
      e.path = rec.at("path").get<std::string>();
      e.label = rec.at("label").get<int>();
      e.split = parse_split(rec.at("split").get<std::string>());
      m.entries.push_back(std::move(e));
    } catch (const json::exception& ex) {
      throw InvalidArgument("manifest: malformed entry at line " + std::to_string(lineno) + ": " +
                            ex.what());
    }
  }
  if (!have_header) throw InvalidArgument("manifest: missing header record");
  validate_manifest(m, true);
  return m;
}

LoadedSplit load_split(const DatasetManifest& manifest, Split split) {
  LoadedSplit out;
  std::vector<torch::Tensor> images;
  std::vector<std::int64_t> labels;
  for (const auto& e : manifest.entries) {
    if (e.split != split) continue;
    images.push_back(manifest.load_image(e).pixels);
    labels.push_back(e.label);
    out.ids.push_back(e.path);
  }
  const int r = manifest.resolution;
  out.images = images.empty() ? torch::empty({0, 3, r, r}) : torch::stack(images);
  out.labels = torch::tensor(labels, torch::kInt64);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double draw(std::mt19937_64& rng, ParamRange r) { return r.lo + (r.hi - r.lo) * uniform01(rng); }

// Smooth value noise: bilinear interpolation of a (g+1)x(g+1) random grid.
std::vector<double> value_noise(std::uint64_t seed, int res, int grid) {
  std::mt19937_64 rng(seed);
  std::vector<double> lattice(static_cast<std::size_t>(grid + 1) * (grid + 1));
  for (auto& v : lattice) v = uniform01(rng);
  std::vector<double> out(static_cast<std::size_t>(res) * res);
  for (int y = 0; y < res; ++y) {
    for (int x = 0; x < res; ++x) {
      const double gx = (x + 0.5) / res * grid, gy = (y + 0.5) / res * grid;
      const int ix = std::min(static_cast<int>(gx), grid - 1), iy = std::min(static_cast<int>(gy), grid - 1);
      const double fx = gx - ix, fy = gy - iy;
      auto at = [&](int i, int j) { return lattice[static_cast<std::size_t>(j) * (grid + 1) + i]; };
      out[static_cast<std::size_t>(y) * res + x] =
          (1 - fy) * ((1 - fx) * at(ix, iy) + fx * at(ix + 1, iy)) +
          fy * ((1 - fx) * at(ix, iy + 1) + fx * at(ix + 1, iy + 1));
    }
  }
  return out;
}

constexpr double kLightSkin[3] = {0.93, 0.78, 0.68};
constexpr double kDarkSkin[3] = {0.42, 0.28, 0.20};
constexpr double kLesionTint[3] = {1.00, 0.88, 0.80};

void check_range(double v, double lo, double hi, const char* name, bool hi_open = false) {
  if (!std::isfinite(v) || v < lo || (hi_open ? v >= hi : v > hi))
    throw InvalidArgument(std::string("toy blob: ") + name + " out of range");
}

}  // namespace

void ToyBlobParams::validate() const {
  check_range(lesion_radius, 0.0, 0.5, "lesion_radius");
  check_range(lesion_pigment, 0.0, 1.0, "lesion_pigment");
  check_range(skin_tone, 0.0, 1.0, "skin_tone");
  check_range(eccentricity, 0.0, 1.0, "eccentricity", true);
  check_range(center_dx, -0.5, 0.5, "center_dx");
  check_range(center_dy, -0.5, 0.5, "center_dy");
}

ImageTensor render_toy_blob(const ToyBlobParams& p, int resolution) {
  p.validate();
  if (resolution < 4) throw InvalidArgument("toy blob: resolution too small");
  const int n = resolution;
  const double a = p.lesion_radius * n;
  const double b = a * std::sqrt(1.0 - p.eccentricity * p.eccentricity);
  const double cx = n * (0.5 + p.center_dx), cy = n * (0.5 + p.center_dy);
  const auto texture = value_noise(p.texture_seed, n, 6);
  const auto grain = value_noise(p.texture_seed ^ 0x9e3779b97f4a7c15ULL, n, 16);

  double skin[3], lesion[3];
  const double darkness = 0.75 - 0.5 * p.lesion_pigment;
  for (int c = 0; c < 3; ++c) {
    skin[c] = kLightSkin[c] + (kDarkSkin[c] - kLightSkin[c]) * p.skin_tone;
    lesion[c] = skin[c] * kLesionTint[c] * darkness;
  }

  constexpr int kSub = 4;  // supersampling for anti-aliased coverage
  auto img = torch::empty({3, n, n}, torch::kFloat32);
  auto acc = img.accessor<float, 3>();
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      double coverage = 0;
      if (a > 0 && b > 0) {
        for (int sy = 0; sy < kSub; ++sy)
          for (int sx = 0; sx < kSub; ++sx) {
            const double px = x + (sx + 0.5) / kSub - cx, py = y + (sy + 0.5) / kSub - cy;
            if ((px * px) / (a * a) + (py * py) / (b * b) <= 1.0) coverage += 1.0;
          }
        coverage /= kSub * kSub;
      }
      const auto idx = static_cast<std::size_t>(y) * n + x;
      const double tex = 1.0 + 0.12 * (texture[idx] - 0.5);
      const double gr = 1.0 + 0.03 * (grain[idx] - 0.5);
      for (int c = 0; c < 3; ++c) {
        const double v = ((1 - coverage) * skin[c] + coverage * lesion[c] * tex) * gr;
        acc[c][y][x] = static_cast<float>(std::clamp(v, 0.0, 1.0) * 2.0 - 1.0);
      }
    }
  }
  return {img, {}};
}

double expected_lesion_area(const ToyBlobParams& p, int resolution) {
  const double a = p.lesion_radius * resolution;
  return std::numbers::pi * a * a * std::sqrt(1.0 - p.eccentricity * p.eccentricity);
}

std::int64_t measure_lesion_area(const ImageTensor& image) {
  auto rgb = (image.pixels.to(torch::kFloat64) + 1.0) * 0.5;
  auto lum = (0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]).reshape({-1}).contiguous();
  auto sorted = std::get<0>(lum.sort());
  const auto n = sorted.numel();
  const double background = sorted[n / 2].item<double>();
  const double core = sorted[std::min<std::int64_t>(n - 1, n / 50)].item<double>();
  if (background - core < 0.08 * background) return 0;
  const double threshold = 0.5 * (background + core);
  return (lum < threshold).sum().item<std::int64_t>();
}

std::vector<ToyClassSpec> parse_class_spec(std::string_view text) {
  std::vector<ToyClassSpec> out;
  auto trim = [](std::string_view s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string_view::npos) return std::string_view{};
    return s.substr(b, s.find_last_not_of(" \t") - b + 1);
  };
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto end = text.find(';', pos);
    if (end == std::string_view::npos) end = text.size();
    auto item = trim(text.substr(pos, end - pos));
    pos = end + 1;
    if (item.empty()) continue;
    ToyClassSpec spec;
    const auto colon = item.find(':');
    spec.name = std::string(trim(item.substr(0, colon)));
    if (spec.name.empty()) throw InvalidArgument("class spec: empty class name");
    if (colon != std::string_view::npos) {
      auto rest = item.substr(colon + 1);
      std::size_t p = 0;
      while (p <= rest.size()) {
        auto e = rest.find(',', p);
        if (e == std::string_view::npos) e = rest.size();
        auto kv = trim(rest.substr(p, e - p));
        p = e + 1;
        if (kv.empty()) continue;
        const auto eq = kv.find('=');
        if (eq == std::string_view::npos) throw InvalidArgument("class spec: expected key=lo-hi");
        const auto key = trim(kv.substr(0, eq));
        const std::string val(trim(kv.substr(eq + 1)));
        // The separator is the first '-' that is not a leading sign.
        const auto dash = val.find('-', 1);
        ParamRange r;
        try {
          if (dash == std::string::npos) {
            r.lo = r.hi = std::stod(val);
          } else {
            r.lo = std::stod(val.substr(0, dash));
            r.hi = std::stod(val.substr(dash + 1));
          }
        } catch (const std::exception&) {
          throw InvalidArgument("class spec: bad range '" + val + "'");
        }
        if (r.hi < r.lo) throw InvalidArgument("class spec: inverted range '" + val + "'");
        if (key == "radius") spec.radius = r;
        else if (key == "pigment") spec.pigment = r;
        else if (key == "skin") spec.skin = r;
        else if (key == "eccentricity") spec.eccentricity = r;
        else if (key == "dx") spec.dx = r;
        else if (key == "dy") spec.dy = r;
        else throw InvalidArgument("class spec: unknown parameter '" + std::string(key) + "'");
      }
    }
    out.push_back(std::move(spec));
  }
  if (out.empty()) throw InvalidArgument("class spec: no classes");
  return out;
}

DirectoryLock::DirectoryLock(fs::path dir) : lock_file_(std::move(dir) / ".dermagan.lock") {
  const int fd = ::open(lock_file_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) throw IoError("directory is locked or unwritable: " + lock_file_.string());
  ::close(fd);
}

DirectoryLock::~DirectoryLock() {
  std::error_code ec;
  fs::remove(lock_file_, ec);
}

DatasetManifest make_toy_dataset(const ToyDatasetOptions& opt, const fs::path& out_dir) {
  if (opt.n_per_class < 1) throw InvalidArgument("make_toy_dataset: n_per_class must be >= 1");
  if (opt.classes.empty()) throw InvalidArgument("make_toy_dataset: no classes");
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  if (ec) throw IoError("make_toy_dataset: unwritable output directory " + out_dir.string());
  DirectoryLock lock(out_dir);

  DatasetManifest m;
  m.root = fs::absolute(out_dir);
  m.resolution = opt.resolution;
  std::mt19937_64 rng(opt.seed);
  const int n = opt.n_per_class;
  const int n_val = static_cast<int>(std::floor(n * opt.val_fraction + 0.5));
  const int n_test = static_cast<int>(std::floor(n * opt.test_fraction + 0.5));
  if (n_val + n_test > n) throw InvalidArgument("make_toy_dataset: split fractions exceed 1");

  for (std::size_t label = 0; label < opt.classes.size(); ++label) {
    const auto& spec = opt.classes[label];
    m.class_names.push_back(spec.name);
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<Split> split_of(n, Split::train);
    for (int i = 0; i < n_val; ++i) split_of[order[i]] = Split::val;
    for (int i = n_val; i < n_val + n_test; ++i) split_of[order[i]] = Split::test;

    for (int i = 0; i < n; ++i) {
      ToyBlobParams p;
      p.lesion_radius = draw(rng, spec.radius);
      p.lesion_pigment = draw(rng, spec.pigment);
      p.skin_tone = draw(rng, spec.skin);
      p.eccentricity = draw(rng, spec.eccentricity);
      p.center_dx = draw(rng, spec.dx);
      p.center_dy = draw(rng, spec.dy);
      p.texture_seed = rng();
      char name[64];
      std::snprintf(name, sizeof(name), "images/c%02zu_%05d.png", label, i);
      write_png(out_dir / name, render_toy_blob(p, opt.resolution));
      m.entries.push_back({name, static_cast<int>(label), split_of[i]});
    }
  }
  validate_manifest(m, true);
  m.save(out_dir / "manifest.jsonl");
  return m;
}

}  // namespace dermagan
