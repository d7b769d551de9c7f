#include "fusionreid/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "fusionreid/image_io.hpp"

namespace fusionreid {

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::query: return "query";
    case Split::gallery: return "gallery";
  }
  return "?";
}

Split parse_split(const std::string& name) {
  for (auto s : {Split::train, Split::query, Split::gallery}) {
    if (to_string(s) == name) return s;
  }
  throw DataError("unknown split '" + name + "' (expected train, query or gallery)");
}

std::vector<std::size_t> Dataset::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].split == split) out.push_back(i);
  }
  return out;
}

std::vector<int> Dataset::pids(const std::vector<std::size_t>& subset) const {
  std::set<int> s;
  for (std::size_t i : subset) s.insert(samples.at(i).pid);
  return {s.begin(), s.end()};
}

int Dataset::max_cam_id() const {
  int m = -1;
  for (const auto& s : samples) m = std::max(m, s.cam_id);
  return m;
}

std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> ids) {
  std::vector<std::uint32_t> words{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32)};
  for (auto id : ids) {
    words.push_back(static_cast<std::uint32_t>(id));
    words.push_back(static_cast<std::uint32_t>(id >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[1]) << 32) | out[0];
}

// ---------------------------------------------------------------------------
// Synthetic data

void SynthConfig::validate() const {
  if (num_pids < 2) throw ConfigError("synth: num_pids must be >= 2");
  if (cams < 2) throw ConfigError("synth: cams must be >= 2");
  if (views_per_cam == 0) throw ConfigError("synth: views_per_cam must be >= 1");
  if (holdout_views >= views_per_cam) throw ConfigError("synth: holdout_views must be < views_per_cam");
  if (height < 8 || width < 8) {
    throw ConfigError("synth: image size " + std::to_string(height) + "x" + std::to_string(width) +
                      " is smaller than one 8x8 patch");
  }
  if (noise < 0.0) throw ConfigError("synth: noise must be >= 0");
}

namespace {

struct Prototype {
  double upper[3], lower[3], stripe[3];
  std::size_t period;
  double split;
};

struct Camera {
  double brightness;
  double gain[3];
  double background;
};

}  // namespace

Dataset synth_generate(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, {0x5e7}));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };

  std::vector<Prototype> protos(cfg.num_pids);
  for (auto& p : protos) {
    for (int c = 0; c < 3; ++c) p.upper[c] = uni(0.05, 0.95);
    for (int c = 0; c < 3; ++c) p.lower[c] = uni(0.05, 0.95);
    for (int c = 0; c < 3; ++c) p.stripe[c] = uni(0.0, 1.0);
    p.period = 2 + static_cast<std::size_t>(u(rng) * 4.0);
    p.split = uni(0.4, 0.6);
  }
  std::vector<Camera> cams(cfg.cams);
  for (auto& c : cams) {
    c.brightness = uni(0.85, 1.15);
    for (int k = 0; k < 3; ++k) c.gain[k] = uni(0.9, 1.1);
    c.background = uni(0.4, 0.6);
  }

  const std::size_t h = cfg.height, w = cfg.width;
  const std::size_t top = h / 10, bottom = h - h / 20;
  const std::size_t left = w / 5, right = w - w / 5;
  const int max_shift = static_cast<int>(std::max<std::size_t>(1, w / 16));
  std::normal_distribution<double> noise(0.0, cfg.noise);

  Dataset ds;
  ds.height = h;
  ds.width = w;
  for (std::size_t pid = 0; pid < cfg.num_pids; ++pid) {
    const Prototype& p = protos[pid];
    for (std::size_t cam = 0; cam < cfg.cams; ++cam) {
      const Camera& c = cams[cam];
      for (std::size_t view = 0; view < cfg.views_per_cam; ++view) {
        const int dy = static_cast<int>(rng() % (2 * max_shift + 1)) - max_shift;
        const int dx = static_cast<int>(rng() % (2 * max_shift + 1)) - max_shift;
        std::vector<double> img(3 * h * w);
        for (std::size_t y = 0; y < h; ++y) {
          for (std::size_t x = 0; x < w; ++x) {
            const long sy = static_cast<long>(y) - dy, sx = static_cast<long>(x) - dx;
            const bool body = sy >= static_cast<long>(top) && sy < static_cast<long>(bottom) &&
                              sx >= static_cast<long>(left) && sx < static_cast<long>(right);
            const std::size_t split_row = top + static_cast<std::size_t>(p.split * static_cast<double>(bottom - top));
            for (std::size_t ch = 0; ch < 3; ++ch) {
              double v = c.background;
              if (body) {
                const auto row = static_cast<std::size_t>(sy);
                if (row < split_row) {
                  v = ((row - top) / p.period) % 2 == 1 ? p.stripe[ch] : p.upper[ch];
                } else {
                  v = p.lower[ch];
                }
                v *= c.brightness * c.gain[ch];
              }
              img[(ch * h + y) * w + x] = v + noise(rng);
            }
          }
        }
        Sample s;
        s.image = quantize_8bit(Tensor({3, h, w}, std::move(img)));
        s.pid = static_cast<int>(pid);
        s.cam_id = static_cast<int>(cam);
        s.split = view + cfg.holdout_views >= cfg.views_per_cam ? Split::gallery : Split::train;
        ds.samples.push_back(std::move(s));
      }
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// On-disk datasets

void write_dataset(Dataset& dataset, const std::filesystem::path& root) {
  std::error_code ec;
  std::filesystem::create_directories(root / "images", ec);
  if (ec) throw IoError("cannot create '" + (root / "images").string() + "': " + ec.message());
  std::ofstream manifest(root / "manifest.csv", std::ios::binary);
  if (!manifest) throw IoError("cannot write '" + (root / "manifest.csv").string() + "'");
  manifest << "path,pid,cam_id,split\n";
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    Sample& s = dataset.samples[i];
    std::ostringstream name;
    name << "images/" << s.pid << "_c" << s.cam_id << "_" << i << ".ppm";
    write_ppm(root / name.str(), s.image);
    s.path = name.str();
    manifest << s.path << ',' << s.pid << ',' << s.cam_id << ',' << to_string(s.split) << '\n';
  }
  if (!manifest) throw IoError("write failed for '" + (root / "manifest.csv").string() + "'");
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

bool parse_int(const std::string& s, long& v) {
  if (s.empty()) return false;
  std::size_t used = 0;
  try {
    v = std::stol(s, &used);
  } catch (const std::exception&) {
    return false;
  }
  return used == s.size();
}

}  // namespace

Dataset load_dataset(const std::filesystem::path& manifest, std::size_t height, std::size_t width) {
  std::ifstream in(manifest, std::ios::binary);
  if (!in) throw IoError("cannot open manifest '" + manifest.string() + "'");
  Dataset ds;
  ds.height = height;
  ds.width = width;
  std::string line;
  if (!std::getline(in, line)) return ds;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "path,pid,cam_id,split") {
    throw DataError("manifest '" + manifest.string() + "': expected header 'path,pid,cam_id,split', found '" + line +
                    "'");
  }
  const std::filesystem::path root = manifest.parent_path();
  std::vector<std::string> problems;
  std::set<std::string> seen;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(lineno) + ": ";
    const auto f = split_csv(line);
    if (f.size() != 4) {
      problems.push_back(where + "expected 4 fields, found " + std::to_string(f.size()));
      continue;
    }
    long pid = 0, cam = 0;
    bool ok = true;
    if (!parse_int(f[1], pid) || pid < 0) {
      problems.push_back(where + "invalid pid '" + f[1] + "'");
      ok = false;
    }
    if (!parse_int(f[2], cam) || cam < 0) {
      problems.push_back(where + "invalid cam_id '" + f[2] + "'");
      ok = false;
    }
    Split split = Split::train;
    try {
      split = parse_split(f[3]);
    } catch (const DataError& e) {
      problems.push_back(where + e.what());
      ok = false;
    }
    if (!seen.insert(f[0]).second) {
      problems.push_back(where + "duplicate path '" + f[0] + "'");
      ok = false;
    }
    if (!ok) continue;
    try {
      Tensor img = read_ppm(root / f[0]);
      if (img.size(1) != height || img.size(2) != width) img = resize_bilinear(img, height, width);
      ds.samples.push_back({img, static_cast<int>(pid), static_cast<int>(cam), split, f[0]});
    } catch (const Error& e) {
      problems.push_back(where + e.what());
    }
  }
  if (!problems.empty()) {
    std::string msg = "manifest '" + manifest.string() + "': " + std::to_string(problems.size()) + " load error(s)";
    for (const auto& p : problems) msg += "\n  " + p;
    throw DataError(msg);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// PK sampling

PkSampler::PkSampler(const Dataset& dataset, const std::vector<std::size_t>& pool, std::size_t p, std::size_t k,
                     std::uint64_t seed)
    : p_(p), k_(k), seed_(seed) {
  if (p == 0 || k == 0) throw ConfigError("pk sampler: P and K must be >= 1");
  std::map<int, std::vector<std::size_t>> by_pid;
  for (std::size_t i : pool) by_pid[dataset.samples.at(i).pid].push_back(i);
  if (by_pid.size() < p) {
    throw ConfigError("pk sampler: " + std::to_string(by_pid.size()) + " pids available, P = " + std::to_string(p));
  }
  for (auto& [pid, members] : by_pid) {
    pid_list_.push_back(pid);
    members_.push_back(std::move(members));
  }
}

Batch PkSampler::batch(std::size_t step) const {
  const std::size_t per_epoch = batches_per_epoch();
  Batch b;
  b.step = step;
  b.epoch = step / per_epoch;
  const std::size_t slot = step % per_epoch;

  std::vector<std::size_t> order(pid_list_.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng epoch_rng(derive_seed(seed_, {0x9c, b.epoch}));
  std::shuffle(order.begin(), order.end(), epoch_rng);

  for (std::size_t j = slot * p_; j < (slot + 1) * p_; ++j) {
    const std::size_t entry = order[j];
    const int pid = pid_list_[entry];
    std::vector<std::size_t> members = members_[entry];
    Rng pid_rng(derive_seed(seed_, {0x9d, b.epoch, static_cast<std::uint64_t>(pid)}));
    if (members.size() >= k_) {
      std::shuffle(members.begin(), members.end(), pid_rng);
      members.resize(k_);
    } else {
      b.resampled_pids.push_back(pid);
      std::vector<std::size_t> drawn(k_);
      for (auto& d : drawn) d = members[pid_rng() % members.size()];
      members = std::move(drawn);
    }
    for (std::size_t idx : members) {
      b.indices.push_back(idx);
      b.pids.push_back(pid);
    }
  }
  return b;
}

// ---------------------------------------------------------------------------
// Augmentation

void AugmentPolicy::validate() const {
  for (double p : {flip_prob, crop_prob, erase_prob}) {
    if (p < 0.0 || p > 1.0) throw ConfigError("augment: probabilities must lie in [0, 1]");
  }
  if (!(erase_area_min > 0.0 && erase_area_min <= erase_area_max && erase_area_max <= 1.0)) {
    throw ConfigError("augment: erase area range must satisfy 0 < min <= max <= 1");
  }
  if (!(erase_aspect_min > 0.0 && erase_aspect_min <= erase_aspect_max)) {
    throw ConfigError("augment: erase aspect range must satisfy 0 < min <= max");
  }
  if (fill.size() != 3) throw ConfigError("augment: fill needs one value per channel");
}

namespace {
void check_image(const Tensor& image, const char* op) {
  if (image.dim() != 3) throw DimensionError(std::string(op) + " expects [C,H,W], got " + shape_str(image.shape()));
}
}  // namespace

Tensor hflip(const Tensor& image) {
  check_image(image, "hflip");
  const std::size_t c_n = image.size(0), h = image.size(1), w = image.size(2);
  std::vector<double> out(image.numel());
  for (std::size_t c = 0; c < c_n; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[(c * h + y) * w + x] = image[(c * h + y) * w + (w - 1 - x)];
  return Tensor(image.shape(), std::move(out));
}

Tensor pad_crop(const Tensor& image, std::size_t pad, std::size_t top, std::size_t left) {
  check_image(image, "pad_crop");
  const std::size_t c_n = image.size(0), h = image.size(1), w = image.size(2);
  if (pad >= h || pad >= w) throw ConfigError("crop padding " + std::to_string(pad) + " must be below the image size");
  if (top > 2 * pad || left > 2 * pad) throw ConfigError("crop offset outside the padded image");
  auto reflect = [](long i, std::size_t n) {
    if (i < 0) return static_cast<std::size_t>(-i);
    if (i >= static_cast<long>(n)) return static_cast<std::size_t>(2 * static_cast<long>(n) - 2 - i);
    return static_cast<std::size_t>(i);
  };
  std::vector<double> out(image.numel());
  for (std::size_t c = 0; c < c_n; ++c)
    for (std::size_t y = 0; y < h; ++y) {
      const std::size_t sy = reflect(static_cast<long>(y + top) - static_cast<long>(pad), h);
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t sx = reflect(static_cast<long>(x + left) - static_cast<long>(pad), w);
        out[(c * h + y) * w + x] = image[(c * h + sy) * w + sx];
      }
    }
  return Tensor(image.shape(), std::move(out));
}

Tensor erase_region(const Tensor& image, std::size_t top, std::size_t left, std::size_t height, std::size_t width,
                    const std::vector<double>& fill) {
  check_image(image, "erase");
  const std::size_t c_n = image.size(0), h = image.size(1), w = image.size(2);
  if (top + height > h || left + width > w) throw DimensionError("erase region outside the image");
  if (fill.size() != c_n) throw ConfigError("erase: fill needs one value per channel");
  Tensor out = image.detach().clone();
  for (std::size_t c = 0; c < c_n; ++c)
    for (std::size_t y = top; y < top + height; ++y)
      for (std::size_t x = left; x < left + width; ++x) out.data()[(c * h + y) * w + x] = fill[c];
  return out;
}

Tensor augment(const Tensor& image, Rng& rng, const AugmentPolicy& policy) {
  check_image(image, "augment");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::size_t h = image.size(1), w = image.size(2);
  Tensor out = image;
  if (u(rng) < policy.flip_prob) out = hflip(out);
  if (policy.crop_pad > 0 && u(rng) < policy.crop_prob) {
    const std::size_t span = 2 * policy.crop_pad + 1;
    const std::size_t top = rng() % span;
    const std::size_t left = rng() % span;
    out = pad_crop(out, policy.crop_pad, top, left);
  }
  if (u(rng) < policy.erase_prob) {
    const double area = static_cast<double>(h * w);
    for (int attempt = 0; attempt < 100; ++attempt) {
      const double target = area * (policy.erase_area_min + (policy.erase_area_max - policy.erase_area_min) * u(rng));
      const double aspect = policy.erase_aspect_min + (policy.erase_aspect_max - policy.erase_aspect_min) * u(rng);
      const auto eh = static_cast<std::size_t>(std::lround(std::sqrt(target * aspect)));
      const auto ew = static_cast<std::size_t>(std::lround(std::sqrt(target / aspect)));
      if (eh == 0 || ew == 0 || eh >= h || ew >= w) continue;
      const std::size_t top = rng() % (h - eh + 1);
      const std::size_t left = rng() % (w - ew + 1);
      out = erase_region(out, top, left, eh, ew, policy.fill);
      break;
    }
  }
  return out.same_storage(image) ? image.detach().clone() : out;
}

ChannelStats channel_stats(const Dataset& dataset, const std::vector<std::size_t>& subset) {
  if (subset.empty()) throw DataError("channel statistics need at least one sample");
  ChannelStats s{std::vector<double>(3, 0.0), std::vector<double>(3, 0.0)};
  std::vector<double> sq(3, 0.0);
  double count = 0.0;
  for (std::size_t i : subset) {
    const Tensor& img = dataset.samples.at(i).image;
    const std::size_t n = img.size(1) * img.size(2);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t k = 0; k < n; ++k) {
        const double v = img[c * n + k];
        s.mean[c] += v;
        sq[c] += v * v;
      }
    count += static_cast<double>(n);
  }
  for (std::size_t c = 0; c < 3; ++c) {
    s.mean[c] /= count;
    s.stddev[c] = std::sqrt(std::max(sq[c] / count - s.mean[c] * s.mean[c], 1e-12));
  }
  return s;
}

Tensor stack_images(const Dataset& dataset, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw DataError("cannot stack an empty batch");
  const std::size_t h = dataset.height, w = dataset.width, n = 3 * h * w;
  std::vector<double> out(indices.size() * n);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const Tensor& img = dataset.samples.at(indices[b]).image;
    if (img.numel() != n) throw DimensionError("sample " + std::to_string(indices[b]) + " has shape " + shape_str(img.shape()));
    std::copy(img.data().begin(), img.data().end(), out.begin() + static_cast<std::ptrdiff_t>(b * n));
  }
  return Tensor({indices.size(), 3, h, w}, std::move(out));
}

}  // namespace fusionreid
