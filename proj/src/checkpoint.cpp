#include "albertlab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

namespace albert {

namespace {

constexpr char kMagic[4] = {'A', 'L', 'B', 'T'};
constexpr std::uint32_t kMaxPathLen = 4096;
constexpr std::uint32_t kMaxRank = 8;

template <typename T>
void write_pod(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::string& path) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw IoError("truncated checkpoint '" + path + "'");
  return value;
}

void write_tensor(std::ostream& out, const std::string& name, const Tensor& t) {
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (int d : t.shape()) write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(d));
  write_pod<std::uint8_t>(out, 1);  // f64
  out.write(reinterpret_cast<const char*>(t.data().data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
}

struct RawTensor {
  std::string name;
  Tensor tensor;
};

RawTensor read_tensor(std::istream& in, const std::string& path) {
  RawTensor r;
  const auto name_len = read_pod<std::uint32_t>(in, path);
  if (name_len == 0 || name_len > kMaxPathLen) {
    throw IoError("corrupt checkpoint '" + path + "': implausible path length");
  }
  r.name.resize(name_len);
  in.read(r.name.data(), name_len);
  if (!in) throw IoError("truncated checkpoint '" + path + "'");

  const auto rank = read_pod<std::uint32_t>(in, path);
  if (rank > kMaxRank) {
    throw IoError("corrupt checkpoint '" + path + "': implausible rank for '" + r.name + "'");
  }
  Shape shape(rank);
  std::size_t numel = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const auto d = read_pod<std::uint64_t>(in, path);
    if (d == 0 || d > (1ull << 32)) {
      throw IoError("corrupt checkpoint '" + path + "': implausible dimension for '" + r.name +
                    "'");
    }
    shape[i] = static_cast<int>(d);
    numel *= static_cast<std::size_t>(d);
  }
  const auto dtype = read_pod<std::uint8_t>(in, path);
  r.tensor = Tensor::zeros(shape);
  if (dtype == 1) {
    in.read(reinterpret_cast<char*>(r.tensor.data().data()),
            static_cast<std::streamsize>(numel * sizeof(double)));
  } else if (dtype == 0) {
    std::vector<float> buf(numel);
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(numel * sizeof(float)));
    for (std::size_t i = 0; i < numel; ++i) r.tensor.data()[i] = static_cast<double>(buf[i]);
  } else {
    throw IoError("corrupt checkpoint '" + path + "': unknown dtype code " +
                  std::to_string(int(dtype)) + " for '" + r.name + "'");
  }
  if (!in) throw IoError("truncated checkpoint '" + path + "'");
  return r;
}

}  // namespace

std::string sidecar_path(const std::string& path) {
  return std::filesystem::path(path).replace_extension(".json").string();
}

void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const ParameterStore& params,
                     const std::vector<std::pair<std::string, Tensor>>& extra_tensors,
                     const nlohmann::json& extra_sidecar) {
  const ModelConfig normalized = cfg.normalized();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint '" + path + "'");
  out.write(kMagic, 4);
  write_pod<std::uint32_t>(out, kCheckpointVersion);
  write_pod<std::uint64_t>(out, params.size() + extra_tensors.size());
  for (const std::string& name : params.paths()) write_tensor(out, name, params.at(name));
  for (const auto& [name, t] : extra_tensors) write_tensor(out, name, t);
  out.flush();
  if (!out) throw IoError("cannot write checkpoint '" + path + "'");

  nlohmann::json side = extra_sidecar.is_object() ? extra_sidecar : nlohmann::json::object();
  side["format_version"] = kCheckpointVersion;
  side["model"] = model_config_to_json(normalized);
  std::ofstream js(sidecar_path(path), std::ios::trunc);
  if (!js) throw IoError("cannot write checkpoint sidecar '" + sidecar_path(path) + "'");
  js << side.dump(2) << "\n";
  js.flush();
  if (!js) throw IoError("cannot write checkpoint sidecar '" + sidecar_path(path) + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream js(sidecar_path(path));
  if (!js) throw IoError("missing checkpoint sidecar '" + sidecar_path(path) + "'");
  nlohmann::json side;
  try {
    js >> side;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad checkpoint sidecar '" + sidecar_path(path) + "': " + e.what());
  }
  if (!side.is_object() || !side.contains("model")) {
    throw IoError("checkpoint sidecar '" + sidecar_path(path) + "' has no model config");
  }

  Checkpoint ckpt;
  ckpt.sidecar = side;
  ckpt.config = model_config_from_json(side.at("model")).normalized();
  ckpt.params = build_model(ckpt.config, 0);

  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw IoError("'" + path + "' is not an ALBT checkpoint (bad magic)");
  }
  const auto version = read_pod<std::uint32_t>(in, path);
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version) + " in '" + path +
                  "'");
  }
  const auto count = read_pod<std::uint64_t>(in, path);
  if (count > 1'000'000) throw IoError("corrupt checkpoint '" + path + "': implausible count");

  std::set<std::string> seen;
  for (std::uint64_t i = 0; i < count; ++i) {
    RawTensor r = read_tensor(in, path);
    if (!seen.insert(r.name).second) {
      throw IoError("corrupt checkpoint '" + path + "': duplicate tensor '" + r.name + "'");
    }
    if (r.name.rfind("optim.", 0) == 0) {
      ckpt.extra_tensors.emplace_back(r.name, std::move(r.tensor));
      continue;
    }
    if (!ckpt.params.has(r.name)) {
      throw IoError("checkpoint '" + path + "' has tensor '" + r.name +
                    "' that the configured model does not");
    }
    Tensor& dst = ckpt.params.at(r.name);
    if (dst.shape() != r.tensor.shape()) {
      throw IoError("checkpoint '" + path + "' tensor '" + r.name + "' has shape " +
                    shape_to_string(r.tensor.shape()) + ", model expects " +
                    shape_to_string(dst.shape()));
    }
    std::copy(r.tensor.data().begin(), r.tensor.data().end(), dst.data().begin());
  }
  for (const std::string& name : ckpt.params.paths()) {
    if (!seen.count(name)) {
      throw IoError("checkpoint '" + path + "' is missing tensor '" + name + "'");
    }
  }
  return ckpt;
}

}  // namespace albert
