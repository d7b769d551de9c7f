#include "fusionreid/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <json.hpp>

namespace fusionreid {

namespace {

constexpr char kMagic[8] = {'F', 'R', 'I', 'D', 'C', 'K', 'P', 'T'};

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& bytes, const std::string& name) : bytes_(bytes), name_(name) {}

  const char* take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw DataError("checkpoint '" + name_ + "' is truncated (reading " + what + " at byte " +
                      std::to_string(pos_) + ")");
    }
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint64_t u64(const char* what) {
    const auto* p = reinterpret_cast<const unsigned char*>(take(8, what));
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
  }
  std::uint32_t u32(const char* what) {
    const auto* p = reinterpret_cast<const unsigned char*>(take(4, what));
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
    return v;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::string& bytes_;
  std::string name_;
  std::size_t pos_ = 0;
};

const char* const kGroups[3] = {"param", "buffer", "momentum"};

}  // namespace

void checkpoint_save(const CheckpointState& state, const std::filesystem::path& path) {
  nlohmann::json header;
  header["config"] = state.config;
  header["seed"] = state.seed;
  header["step"] = state.step;
  header["tensors"] = nlohmann::json::array();
  const std::map<std::string, Tensor>* groups[3] = {&state.params, &state.buffers, &state.momentum};
  for (int g = 0; g < 3; ++g) {
    for (const auto& [name, t] : *groups[g]) {
      header["tensors"].push_back({{"group", kGroups[g]}, {"path", name}, {"shape", t.shape()}});
    }
  }
  const std::string json = header.dump();

  std::string out(kMagic, sizeof kMagic);
  put_u32(out, kCheckpointVersion);
  put_u64(out, json.size());
  out += json;
  for (const auto* group : groups) {
    for (const auto& [name, t] : *group) {
      for (double v : t.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
    }
  }
  put_u64(out, fnv1a(out));

  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create '" + path.parent_path().string() + "': " + ec.message());
  }
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write '" + tmp.string() + "'");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    f.flush();
    if (!f) throw IoError("write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at '" + path.string() + "': " + ec.message());
}

CheckpointState checkpoint_load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint '" + path.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const std::string name = path.string();
  Reader r(bytes, name);

  if (std::memcmp(r.take(sizeof kMagic, "magic"), kMagic, sizeof kMagic) != 0) {
    throw DataError("'" + name + "' is not a checkpoint (bad magic bytes)");
  }
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint '" + name + "' has format version " + std::to_string(version) +
                    ", this build reads version " + std::to_string(kCheckpointVersion));
  }
  const std::uint64_t json_len = r.u64("header length");
  const char* json_ptr = r.take(json_len, "header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(json_ptr, json_ptr + json_len);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint '" + name + "' has a malformed header: " + e.what());
  }

  CheckpointState st;
  try {
    st.config = header.at("config").get<FlatConfig>();
    st.seed = header.at("seed").get<std::uint64_t>();
    st.step = header.at("step").get<std::size_t>();
    for (const auto& entry : header.at("tensors")) {
      const std::string group = entry.at("group").get<std::string>();
      const std::string tpath = entry.at("path").get<std::string>();
      const Shape shape = entry.at("shape").get<Shape>();
      std::size_t n = 1;
      for (std::size_t s : shape) n *= s;
      std::vector<double> values(n);
      for (double& v : values) v = std::bit_cast<double>(r.u64("tensor data"));
      Tensor t(shape, std::move(values));
      if (group == "param") {
        st.params.emplace(tpath, std::move(t));
      } else if (group == "buffer") {
        st.buffers.emplace(tpath, std::move(t));
      } else if (group == "momentum") {
        st.momentum.emplace(tpath, std::move(t));
      } else {
        throw DataError("checkpoint '" + name + "': unknown tensor group '" + group + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint '" + name + "' has a malformed header: " + e.what());
  }
  const std::size_t body_end = r.pos();
  const std::uint64_t stored = r.u64("checksum");
  if (fnv1a(bytes.substr(0, body_end)) != stored) throw DataError("checkpoint '" + name + "' fails its checksum");
  if (r.pos() != bytes.size()) throw DataError("checkpoint '" + name + "' has trailing bytes");
  return st;
}

CheckpointState capture_state(const RunConfig& cfg, const FusionReid& model, const Sgd* sgd, std::size_t step) {
  CheckpointState st;
  st.config = to_flat(cfg);
  st.seed = cfg.seed;
  st.step = step;
  for (const auto& [p, t] : model.store().params()) st.params.emplace(p, t.detach().clone());
  for (const auto& [p, t] : model.store().buffers()) st.buffers.emplace(p, t.clone());
  if (sgd) {
    for (const auto& [p, t] : sgd->momentum_buffers()) st.momentum.emplace(p, t.clone());
  }
  return st;
}

namespace {

void copy_group(const std::map<std::string, Tensor>& from, const std::map<std::string, Tensor>& into,
                const char* what) {
  if (from.size() != into.size()) {
    throw DimensionError(std::string("checkpoint has ") + std::to_string(from.size()) + " " + what + " tensors, model has " +
                         std::to_string(into.size()));
  }
  for (const auto& [p, dst] : into) {
    const auto it = from.find(p);
    if (it == from.end()) throw DimensionError(std::string("checkpoint is missing ") + what + " '" + p + "'");
    if (it->second.shape() != dst.shape()) {
      throw DimensionError(std::string(what) + " '" + p + "' has shape " + shape_str(it->second.shape()) +
                           " in the checkpoint, " + shape_str(dst.shape()) + " in the model");
    }
  }
  for (const auto& [p, dst] : into) {
    Tensor target = dst;
    const auto src = from.at(p).data();
    std::copy(src.begin(), src.end(), target.data().begin());
  }
}

}  // namespace

void restore_state(const CheckpointState& state, FusionReid& model, Sgd* sgd) {
  FlatConfig saved;
  for (const auto& [k, v] : state.config) {
    if (k.rfind("model.", 0) == 0) saved[k] = v;
  }
  const auto diff = diff_flat(saved, model_flat(model.config()));
  if (!diff.empty()) {
    std::string msg = "checkpoint model config differs from the requested model:";
    for (const auto& d : diff) msg += "\n  " + d;
    throw ConfigError(msg);
  }
  copy_group(state.params, model.store().params(), "parameter");
  copy_group(state.buffers, model.store().buffers(), "buffer");
  if (sgd) {
    if (state.momentum.empty()) throw DataError("checkpoint has no optimizer state to resume from");
    copy_group(state.momentum, sgd->momentum_buffers(), "momentum");
  }
}

}  // namespace fusionreid
