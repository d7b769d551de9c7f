#include "fusionreid/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace fusionreid {

// ---------------------------------------------------------------------------
// Text format

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

bool valid_key(const std::string& k) {
  return !k.empty() && std::all_of(k.begin(), k.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.' || c == '-';
  });
}

}  // namespace

FlatConfig parse_config_text(const std::string& text, const std::string& origin) {
  FlatConfig out;
  std::istringstream in(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    line = trim(strip_comment(line));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (!valid_key(section)) throw ConfigError(where + "invalid section name '" + section + "'");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (!valid_key(key)) throw ConfigError(where + "invalid key '" + key + "'");
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    const std::string full = section.empty() ? key : section + "." + key;
    if (out.count(full)) throw ConfigError(where + "duplicate key '" + full + "'");
    out[full] = value;
  }
  return out;
}

FlatConfig read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config file '" + path.string() + "' not found");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path.string());
}

// ---------------------------------------------------------------------------
// Value codecs

namespace {

std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, r.ptr);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}
std::string fmt(std::size_t v) { return std::to_string(v); }
std::string fmt(bool v) { return v ? "true" : "false"; }
std::string fmt(const std::vector<std::size_t>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + std::to_string(v[i]);
  return s + "]";
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& expected) {
  throw ConfigError("config key '" + key + "': cannot parse '" + value + "' as " + expected);
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) bad_value(key, v, "a number");
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) bad_value(key, v, "a non-negative integer");
  return out;
}

std::size_t to_size(const std::string& key, const std::string& v) { return static_cast<std::size_t>(to_u64(key, v)); }

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  bad_value(key, v, "true or false");
}

std::vector<std::size_t> to_sizes(const std::string& key, const std::string& v) {
  const std::string t = trim(v);
  if (t.size() < 2 || t.front() != '[' || t.back() != ']') bad_value(key, v, "an integer array like [8, 16]");
  std::vector<std::size_t> out;
  std::istringstream in(t.substr(1, t.size() - 2));
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (item.empty()) bad_value(key, v, "an integer array like [8, 16]");
    out.push_back(to_size(key, item));
  }
  return out;
}

struct Entry {
  const char* key;
  const char* help;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
};

#define FR_NUM(KEY, FIELD, HELP)                                                      \
  Entry {                                                                            \
    KEY, HELP, [](const RunConfig& c) { return fmt(c.FIELD); },                      \
        [](RunConfig& c, const std::string& k, const std::string& v) { c.FIELD = to_double(k, v); } \
  }
#define FR_SIZE(KEY, FIELD, HELP)                                                     \
  Entry {                                                                            \
    KEY, HELP, [](const RunConfig& c) { return fmt(static_cast<std::size_t>(c.FIELD)); }, \
        [](RunConfig& c, const std::string& k, const std::string& v) { c.FIELD = to_size(k, v); } \
  }
#define FR_BOOL(KEY, FIELD, HELP)                                                     \
  Entry {                                                                            \
    KEY, HELP, [](const RunConfig& c) { return fmt(c.FIELD); },                      \
        [](RunConfig& c, const std::string& k, const std::string& v) { c.FIELD = to_bool(k, v); } \
  }

const std::vector<Entry>& registry() {
  static const std::vector<Entry> entries = {
      {"seed", "master seed for init, sampling, augmentation and synthetic data",
       [](const RunConfig& c) { return std::to_string(c.seed); },
       [](RunConfig& c, const std::string& k, const std::string& v) { c.seed = to_u64(k, v); }},
      {"data.source", "synthetic | manifest", [](const RunConfig& c) { return c.data_source; },
       [](RunConfig& c, const std::string& k, const std::string& v) {
         if (v != "synthetic" && v != "manifest") bad_value(k, v, "synthetic or manifest");
         c.data_source = v;
       }},
      {"data.manifest", "CSV manifest (path,pid,cam_id,split) when data.source = manifest",
       [](const RunConfig& c) { return c.manifest; },
       [](RunConfig& c, const std::string&, const std::string& v) { c.manifest = v; }},
      FR_SIZE("data.synth.num_pids", synth.num_pids, "synthetic identities"),
      FR_SIZE("data.synth.cams", synth.cams, "synthetic cameras"),
      FR_SIZE("data.synth.views_per_cam", synth.views_per_cam, "images per (pid, camera)"),
      FR_SIZE("data.synth.holdout_views", synth.holdout_views, "views per (pid, camera) held out as gallery"),
      FR_NUM("data.synth.noise", synth.noise, "pixel noise standard deviation"),
      FR_BOOL("aug.enabled", train.augment, "training augmentation on/off"),
      FR_NUM("aug.flip_prob", augment.flip_prob, "horizontal flip probability"),
      FR_NUM("aug.crop_prob", augment.crop_prob, "pad-and-crop probability"),
      FR_SIZE("aug.crop_pad", augment.crop_pad, "reflect padding before the random crop"),
      FR_NUM("aug.erase_prob", augment.erase_prob, "random erasing probability"),
      FR_NUM("aug.erase_area_min", augment.erase_area_min, "minimum erased area fraction"),
      FR_NUM("aug.erase_area_max", augment.erase_area_max, "maximum erased area fraction"),
      FR_NUM("aug.erase_aspect_min", augment.erase_aspect_min, "minimum erased aspect ratio"),
      FR_NUM("aug.erase_aspect_max", augment.erase_aspect_max, "maximum erased aspect ratio"),
      {"model.arch", "fusion | cnn_only | vit_only", [](const RunConfig& c) { return to_string(c.model.arch); },
       [](RunConfig& c, const std::string&, const std::string& v) { c.model.arch = parse_arch(v); }},
      FR_SIZE("model.image_h", model.image_h, "input height"),
      FR_SIZE("model.image_w", model.image_w, "input width"),
      FR_SIZE("model.num_classes", model.num_classes, "classifier outputs; 0 = number of train pids"),
      FR_BOOL("model.bnneck", model.bnneck, "batch-norm neck before each classifier"),
      {"model.cnn.stage_channels", "channels of each residual stage",
       [](const RunConfig& c) { return fmt(c.model.cnn.stage_channels); },
       [](RunConfig& c, const std::string& k, const std::string& v) { c.model.cnn.stage_channels = to_sizes(k, v); }},
      {"model.cnn.blocks_per_stage", "residual blocks in each stage",
       [](const RunConfig& c) { return fmt(c.model.cnn.blocks_per_stage); },
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.model.cnn.blocks_per_stage = to_sizes(k, v);
       }},
      FR_SIZE("model.cnn.stem_stride", model.cnn.stem_stride, "stride of the stem convolution"),
      FR_SIZE("model.cnn.last_stride", model.cnn.last_stride, "stride of the final stage"),
      FR_SIZE("model.vit.patch_size", model.vit.patch_size, "patch side"),
      FR_SIZE("model.vit.patch_stride", model.vit.patch_stride, "patch stride (< patch_size overlaps)"),
      FR_SIZE("model.vit.embed_dim", model.vit.embed_dim, "token width"),
      FR_SIZE("model.vit.depth", model.vit.depth, "encoder blocks"),
      FR_SIZE("model.vit.heads", model.vit.heads, "attention heads"),
      FR_NUM("model.vit.mlp_ratio", model.vit.mlp_ratio, "MLP hidden ratio"),
      FR_SIZE("model.vit.num_cameras", model.vit.num_cameras, "camera embedding rows; 0 = from data"),
      FR_NUM("model.vit.camera_scale", model.vit.camera_scale, "camera embedding scale"),
      FR_SIZE("model.dmf.dim", model.dmf.dim, "fused feature width D"),
      FR_SIZE("model.dmf.heads", model.dmf.heads, "attention heads in SEU and MFU"),
      FR_SIZE("model.dmf.layers", model.dmf.layers, "stacked fusion layers L"),
      FR_BOOL("model.dmf.seu_shared", model.dmf.seu_shared, "one SEU per layer for both branches"),
      FR_BOOL("model.dmf.mfu_shared", model.dmf.mfu_shared, "one MFU per layer for both branches"),
      {"model.dmf.variant", "seu_then_mfu | seu_only | mfu_then_seu | mfu_only",
       [](const RunConfig& c) { return to_string(c.model.dmf.variant); },
       [](RunConfig& c, const std::string&, const std::string& v) { c.model.dmf.variant = parse_variant(v); }},
      FR_NUM("model.dmf.ffn_ratio", model.dmf.ffn_ratio, "FFN hidden ratio"),
      {"model.dmf.pooling", "gem | average",
       [](const RunConfig& c) { return std::string(c.model.dmf.pooling == nn::Pooling::gem ? "gem" : "average"); },
       [](RunConfig& c, const std::string& k, const std::string& v) {
         if (v == "gem") {
           c.model.dmf.pooling = nn::Pooling::gem;
         } else if (v == "average") {
           c.model.dmf.pooling = nn::Pooling::average;
         } else {
           bad_value(k, v, "gem or average");
         }
       }},
      FR_SIZE("model.dmf.lru_kernel", model.dmf.lru_kernel, "depthwise kernel of the refinement unit"),
      FR_NUM("optim.base_lr", optim.base_lr, "learning rate at epoch 0"),
      FR_NUM("optim.peak_lr", optim.peak_lr, "learning rate after warmup"),
      FR_NUM("optim.warmup_epochs", optim.warmup_epochs, "linear warmup length"),
      FR_NUM("optim.total_epochs", optim.total_epochs, "schedule length"),
      FR_NUM("optim.momentum", optim.momentum, "SGD momentum"),
      FR_NUM("optim.weight_decay", optim.weight_decay, "L2 weight decay"),
      FR_NUM("optim.min_lr", optim.min_lr, "learning rate at the end of the cosine"),
      FR_NUM("optim.grad_clip", optim.grad_clip, "global gradient-norm clip; 0 = off"),
      FR_NUM("optim.label_smoothing", optim.label_smoothing, "cross-entropy label smoothing"),
      FR_SIZE("train.p", train.p, "identities per batch"),
      FR_SIZE("train.k", train.k, "images per identity"),
      FR_SIZE("train.steps_per_epoch", train.steps_per_epoch, "steps per schedule epoch; 0 = one PK pass"),
      FR_SIZE("train.max_steps", train.max_steps, "hard step limit; 0 = full schedule"),
      FR_SIZE("train.checkpoint_every", train.checkpoint_every, "periodic checkpoint interval; 0 = final only"),
      {"eval.policy", "train_vs_gallery | query_vs_gallery",
       [](const RunConfig& c) {
         return std::string(c.eval_policy == EvalPolicy::train_vs_gallery ? "train_vs_gallery" : "query_vs_gallery");
       },
       [](RunConfig& c, const std::string& k, const std::string& v) {
         if (v == "train_vs_gallery") {
           c.eval_policy = EvalPolicy::train_vs_gallery;
         } else if (v == "query_vs_gallery") {
           c.eval_policy = EvalPolicy::query_vs_gallery;
         } else {
           bad_value(k, v, "train_vs_gallery or query_vs_gallery");
         }
       }},
      FR_SIZE("eval.batch", eval_batch, "feature extraction batch size"),
  };
  return entries;
}

#undef FR_NUM
#undef FR_SIZE
#undef FR_BOOL

RunConfig defaults() {
  RunConfig c;
  c.model.num_classes = 0;
  c.model.vit.num_cameras = 0;
  return c;
}

const Entry* find_entry(const std::string& key) {
  for (const auto& e : registry()) {
    if (key == e.key) return &e;
  }
  return nullptr;
}

}  // namespace

std::vector<KeyInfo> config_keys() {
  const RunConfig d = defaults();
  std::vector<KeyInfo> out;
  for (const auto& e : registry()) out.push_back({e.key, e.get(d), e.help});
  return out;
}

FlatConfig to_flat(const RunConfig& cfg) {
  FlatConfig out;
  for (const auto& e : registry()) out[e.key] = e.get(cfg);
  return out;
}

RunConfig from_flat(const FlatConfig& flat) {
  RunConfig c = defaults();
  for (const auto& [k, v] : flat) {
    const Entry* e = find_entry(k);
    if (!e) throw ConfigError("unknown config key '" + k + "'");
    e->set(c, k, v);
  }
  c.model.init_seed = c.seed;
  c.synth.seed = c.seed;
  c.synth.height = c.model.image_h;
  c.synth.width = c.model.image_w;
  c.train.augmentation = c.augment;
  return c;
}

FlatConfig model_flat(const ModelConfig& model) {
  RunConfig c = defaults();
  c.model = model;
  FlatConfig out;
  for (const auto& [k, v] : to_flat(c)) {
    if (k.rfind("model.", 0) == 0) out[k] = v;
  }
  return out;
}

void RunConfig::validate() const {
  if (data_source == "manifest" && manifest.empty()) {
    throw ConfigError("config key 'data.manifest' is required when data.source = manifest");
  }
  if (data_source == "synthetic") synth.validate();
  optim.validate();
  train.validate();
  if (eval_batch == 0) throw ConfigError("config key 'eval.batch' must be >= 1");
}

void apply_overrides(FlatConfig& flat, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not of the form key=value");
    const std::string key = trim(o.substr(0, eq));
    std::string value = trim(o.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    if (!find_entry(key)) throw ConfigError("unknown config key '" + key + "' in --override");
    flat[key] = value;
  }
}

RunConfig resolve_config(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& overrides,
                         const char* env_seed) {
  FlatConfig flat;
  if (file) flat = read_config_file(*file);
  if (env_seed && *env_seed) {
    const std::string v = env_seed;
    to_u64("FUSIONREID_SEED", v);
    flat["seed"] = v;
  }
  apply_overrides(flat, overrides);
  return from_flat(flat);
}

std::string to_config_text(const RunConfig& cfg) {
  std::map<std::string, std::vector<std::pair<std::string, std::string>>> sections;
  for (const auto& e : registry()) {
    const std::string key = e.key;
    const auto dot = key.rfind('.');
    const std::string section = dot == std::string::npos ? "" : key.substr(0, dot);
    const std::string leaf = dot == std::string::npos ? key : key.substr(dot + 1);
    std::string value = e.get(cfg);
    const bool is_text = key == "data.source" || key == "data.manifest" || key == "model.arch" ||
                         key == "model.dmf.variant" || key == "model.dmf.pooling" || key == "eval.policy";
    if (is_text) value = "\"" + value + "\"";
    sections[section].emplace_back(leaf, value);
  }
  std::ostringstream out;
  for (const auto& [k, v] : sections[""]) out << k << " = " << v << '\n';
  for (const auto& [name, items] : sections) {
    if (name.empty()) continue;
    out << "\n[" << name << "]\n";
    for (const auto& [k, v] : items) out << k << " = " << v << '\n';
  }
  return out.str();
}

void write_resolved_config(const RunConfig& cfg, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create '" + out_dir.string() + "': " + ec.message());
  std::ofstream out(out_dir / "resolved_config.toml");
  if (!out) throw IoError("cannot write '" + (out_dir / "resolved_config.toml").string() + "'");
  out << to_config_text(cfg);
}

std::vector<std::string> diff_flat(const FlatConfig& expected, const FlatConfig& actual) {
  std::vector<std::string> out;
  for (const auto& [k, v] : expected) {
    const auto it = actual.find(k);
    if (it == actual.end()) {
      out.push_back(k + ": " + v + " != <missing>");
    } else if (it->second != v) {
      out.push_back(k + ": " + v + " != " + it->second);
    }
  }
  for (const auto& [k, v] : actual) {
    if (!expected.count(k)) out.push_back(k + ": <missing> != " + v);
  }
  return out;
}

Dataset load_run_dataset(const RunConfig& cfg) {
  if (cfg.data_source == "manifest") {
    if (cfg.manifest.empty()) throw ConfigError("config key 'data.manifest' is required when data.source = manifest");
    if (!std::filesystem::exists(cfg.manifest)) {
      throw ConfigError("config key 'data.manifest': file '" + cfg.manifest + "' not found");
    }
    return load_dataset(cfg.manifest, cfg.model.image_h, cfg.model.image_w);
  }
  return synth_generate(cfg.synth);
}

void resolve_data_dependent(RunConfig& cfg, const Dataset& data) {
  const auto train = data.indices(Split::train);
  if (cfg.model.num_classes == 0) cfg.model.num_classes = std::max<std::size_t>(2, data.pids(train).size());
  if (cfg.model.vit.num_cameras == 0) {
    cfg.model.vit.num_cameras = static_cast<std::size_t>(std::max(1, data.max_cam_id() + 1));
  }
  if (!train.empty()) {
    cfg.augment.fill = channel_stats(data, train).mean;
    cfg.train.augmentation = cfg.augment;
  }
}

}  // namespace fusionreid
