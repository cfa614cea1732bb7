#include "albertlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace albert {

Sharing sharing_from_string(const std::string& s) {
  if (s == "all") return Sharing::all;
  if (s == "attention_only") return Sharing::attention_only;
  if (s == "ffn_only") return Sharing::ffn_only;
  if (s == "none") return Sharing::none;
  if (s == "grouped") return Sharing::grouped;
  throw ConfigError("unknown sharing strategy '" + s +
                    "' (want all | attention_only | ffn_only | none | grouped)");
}

std::string to_string(Sharing s) {
  switch (s) {
    case Sharing::all: return "all";
    case Sharing::attention_only: return "attention_only";
    case Sharing::ffn_only: return "ffn_only";
    case Sharing::none: return "none";
    case Sharing::grouped: return "grouped";
  }
  return "?";
}

Objective objective_from_string(const std::string& s) {
  if (s == "mlm_only") return Objective::mlm_only;
  if (s == "mlm_nsp") return Objective::mlm_nsp;
  if (s == "mlm_sop") return Objective::mlm_sop;
  throw ConfigError("unknown objective '" + s + "' (want mlm_only | mlm_nsp | mlm_sop)");
}

std::string to_string(Objective o) {
  switch (o) {
    case Objective::mlm_only: return "mlm_only";
    case Objective::mlm_nsp: return "mlm_nsp";
    case Objective::mlm_sop: return "mlm_sop";
  }
  return "?";
}

ModelConfig ModelConfig::normalized() const {
  ModelConfig c = *this;
  if (c.num_layers < 1) throw ConfigError("num_layers must be >= 1");
  if (c.hidden_size < 1 || c.embedding_size < 1 || c.vocab_size < 1 || c.max_positions < 1) {
    throw ConfigError("hidden_size, embedding_size, vocab_size, max_positions must be >= 1");
  }
  if (c.num_heads == 0) {
    if (c.hidden_size < 64) {
      throw ConfigError("num_heads unset and hidden_size " + std::to_string(c.hidden_size) +
                        " < 64 (H/64 rule gives 0); set num_heads explicitly");
    }
    c.num_heads = c.hidden_size / 64;
  }
  if (c.num_heads < 1 || c.hidden_size % c.num_heads != 0) {
    throw ConfigError("hidden_size " + std::to_string(c.hidden_size) +
                      " not divisible by num_heads " + std::to_string(c.num_heads));
  }
  if (c.ffn_size == 0) c.ffn_size = 4 * c.hidden_size;
  if (c.ffn_size < 1) throw ConfigError("ffn_size must be >= 1");
  if (c.sharing == Sharing::grouped) {
    if (c.group_size < 1 || c.num_layers % c.group_size != 0) {
      throw ConfigError("grouped sharing needs num_layers divisible by group_size, got L=" +
                        std::to_string(c.num_layers) + " M=" + std::to_string(c.group_size));
    }
  }
  if (!c.factorize_embedding.has_value()) {
    c.factorize_embedding = (c.embedding_size != c.hidden_size);
  }
  if (!*c.factorize_embedding && c.embedding_size != c.hidden_size) {
    throw ConfigError("factorize_embedding=false requires E == H, got E=" +
                      std::to_string(c.embedding_size) + " H=" + std::to_string(c.hidden_size));
  }
  if (c.dropout_p < 0.0 || c.dropout_p >= 1.0) throw ConfigError("dropout_p must be in [0, 1)");
  return c;
}

bool ModelConfig::factorized() const {
  return factorize_embedding.value_or(embedding_size != hidden_size);
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  static const std::set<std::string> known = {
      "preset",        "num_layers",  "hidden_size",      "num_heads",
      "embedding_size", "vocab_size", "ffn_size",         "max_positions",
      "sharing",       "group_size",  "dropout_p",        "objective",
      "factorize_embedding"};
  for (const auto& item : j.items()) {
    if (known.find(item.key()) == known.end()) {
      throw ConfigError("unknown model config key '" + item.key() + "'");
    }
  }
  ModelConfig c;
  try {
    if (j.contains("preset")) c = preset(j.at("preset").get<std::string>());
    auto geti = [&](const char* k, int cur) { return j.contains(k) ? j.at(k).get<int>() : cur; };
    c.num_layers = geti("num_layers", c.num_layers);
    c.hidden_size = geti("hidden_size", c.hidden_size);
    c.num_heads = geti("num_heads", c.num_heads);
    c.embedding_size = geti("embedding_size", c.embedding_size);
    c.vocab_size = geti("vocab_size", c.vocab_size);
    c.ffn_size = geti("ffn_size", c.ffn_size);
    c.max_positions = geti("max_positions", c.max_positions);
    c.group_size = geti("group_size", c.group_size);
    if (j.contains("sharing")) c.sharing = sharing_from_string(j.at("sharing").get<std::string>());
    if (j.contains("objective")) {
      c.objective = objective_from_string(j.at("objective").get<std::string>());
    }
    if (j.contains("dropout_p")) c.dropout_p = j.at("dropout_p").get<double>();
    if (j.contains("factorize_embedding")) {
      c.factorize_embedding = j.at("factorize_embedding").get<bool>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad model config value: ") + e.what());
  }
  return c;
}

nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  nlohmann::json j;
  j["num_layers"] = cfg.num_layers;
  j["hidden_size"] = cfg.hidden_size;
  j["num_heads"] = cfg.num_heads;
  j["embedding_size"] = cfg.embedding_size;
  j["vocab_size"] = cfg.vocab_size;
  j["ffn_size"] = cfg.ffn_size;
  j["max_positions"] = cfg.max_positions;
  j["sharing"] = to_string(cfg.sharing);
  if (cfg.sharing == Sharing::grouped) j["group_size"] = cfg.group_size;
  j["dropout_p"] = cfg.dropout_p;
  j["objective"] = to_string(cfg.objective);
  if (cfg.factorize_embedding.has_value()) j["factorize_embedding"] = *cfg.factorize_embedding;
  return j;
}

ModelConfig preset(const std::string& name) {
  ModelConfig c;
  c.vocab_size = 30000;
  auto bert = [&](int L, int H, int A) {
    c.num_layers = L;
    c.hidden_size = H;
    c.num_heads = A;
    c.embedding_size = H;
    c.sharing = Sharing::none;
    c.factorize_embedding = false;
    c.objective = Objective::mlm_nsp;
  };
  auto albert = [&](int L, int H, int A) {
    c.num_layers = L;
    c.hidden_size = H;
    c.num_heads = A;
    c.embedding_size = 128;
    c.sharing = Sharing::all;
    c.factorize_embedding = true;
    c.objective = Objective::mlm_sop;
  };
  if (name == "bert-base") {
    bert(12, 768, 12);
  } else if (name == "bert-large") {
    bert(24, 1024, 16);
  } else if (name == "bert-xlarge") {
    bert(24, 2048, 32);
  } else if (name == "albert-base") {
    albert(12, 768, 12);
  } else if (name == "albert-large") {
    albert(24, 1024, 16);
  } else if (name == "albert-xlarge") {
    albert(24, 2048, 32);
  } else if (name == "albert-xxlarge") {
    albert(12, 4096, 64);
  } else if (name == "albert-tiny") {
    // desk-scale config for toy pretraining and tests
    c.num_layers = 2;
    c.hidden_size = 64;
    c.num_heads = 4;
    c.embedding_size = 32;
    c.vocab_size = 64;
    c.ffn_size = 256;
    c.max_positions = 128;
    c.sharing = Sharing::all;
    c.factorize_embedding = true;
    c.objective = Objective::mlm_sop;
  } else {
    throw ConfigError("unknown preset '" + name + "'");
  }
  return c;
}

std::vector<std::string> preset_names() {
  return {"bert-base",     "bert-large",    "bert-xlarge",    "albert-base",
          "albert-large",  "albert-xlarge", "albert-xxlarge", "albert-tiny"};
}

// --- parameter store -------------------------------------------------------

Tensor& ParameterStore::add(const std::string& path, Tensor t) {
  auto [it, inserted] = by_path_.emplace(path, std::move(t));
  if (!inserted) throw UsageError("duplicate parameter path '" + path + "'");
  order_.push_back(path);
  return it->second;
}

bool ParameterStore::has(const std::string& path) const { return by_path_.count(path) > 0; }

const Tensor& ParameterStore::at(const std::string& path) const {
  auto it = by_path_.find(path);
  if (it == by_path_.end()) throw UsageError("unknown parameter path '" + path + "'");
  return it->second;
}

Tensor& ParameterStore::at(const std::string& path) {
  auto it = by_path_.find(path);
  if (it == by_path_.end()) throw UsageError("unknown parameter path '" + path + "'");
  return it->second;
}

long long ParameterStore::total_scalars() const {
  long long n = 0;
  for (const auto& [path, t] : by_path_) n += static_cast<long long>(t.numel());
  return n;
}

void ParameterStore::zero_grads() {
  for (auto& [path, t] : by_path_) t.zero_grad();
}

// --- groups ------------------------------------------------------------------

LayerGroups resolve_layer_groups(Sharing strategy, int num_layers, int group_size) {
  if (num_layers < 1) throw ConfigError("num_layers must be >= 1");
  LayerGroups g;
  g.attention_group_of.resize(num_layers);
  g.ffn_group_of.resize(num_layers);
  auto constant = [&](std::vector<int>& m) { std::fill(m.begin(), m.end(), 0); };
  auto identity = [&](std::vector<int>& m) {
    for (int i = 0; i < num_layers; ++i) m[i] = i;
  };
  switch (strategy) {
    case Sharing::all:
      constant(g.attention_group_of);
      constant(g.ffn_group_of);
      g.num_attention_groups = g.num_ffn_groups = 1;
      break;
    case Sharing::none:
      identity(g.attention_group_of);
      identity(g.ffn_group_of);
      g.num_attention_groups = g.num_ffn_groups = num_layers;
      break;
    case Sharing::attention_only:
      constant(g.attention_group_of);
      identity(g.ffn_group_of);
      g.num_attention_groups = 1;
      g.num_ffn_groups = num_layers;
      break;
    case Sharing::ffn_only:
      identity(g.attention_group_of);
      constant(g.ffn_group_of);
      g.num_attention_groups = num_layers;
      g.num_ffn_groups = 1;
      break;
    case Sharing::grouped: {
      if (group_size < 1 || num_layers % group_size != 0) {
        throw ConfigError("grouped sharing needs num_layers divisible by group_size, got L=" +
                          std::to_string(num_layers) + " M=" + std::to_string(group_size));
      }
      for (int i = 0; i < num_layers; ++i) {
        g.attention_group_of[i] = i / group_size;
        g.ffn_group_of[i] = i / group_size;
      }
      g.num_attention_groups = g.num_ffn_groups = num_layers / group_size;
      break;
    }
  }
  return g;
}

// --- build & count -----------------------------------------------------------

namespace {

constexpr double kInitStddev = 0.02;
constexpr double kLayerNormEps = 1e-12;

Tensor init_normal(Shape shape, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data()) v = rng.truncated_normal(kInitStddev);
  return t;
}

std::string group_path(int g, const char* block, const char* leaf) {
  return "group" + std::to_string(g) + "." + block + "." + leaf;
}

}  // namespace

ParameterStore build_model(const ModelConfig& raw, std::uint64_t seed) {
  const ModelConfig cfg = raw.normalized();
  const int H = cfg.hidden_size, E = cfg.embedding_size, V = cfg.vocab_size;
  const int F = cfg.ffn_size, P = cfg.max_positions;
  LayerGroups groups = resolve_layer_groups(cfg.sharing, cfg.num_layers, cfg.group_size);

  Rng rng(seed);
  ParameterStore ps;
  ps.attention_group_of = groups.attention_group_of;
  ps.ffn_group_of = groups.ffn_group_of;

  auto weight = [&](const std::string& path, Shape shape) { ps.add(path, init_normal(shape, rng)); };
  auto zeros = [&](const std::string& path, Shape shape) { ps.add(path, Tensor::zeros(shape)); };
  auto norm = [&](const std::string& prefix, int width) {
    ps.add(prefix + ".gamma", Tensor::full({width}, 1.0));
    ps.add(prefix + ".beta", Tensor::zeros({width}));
  };

  weight("embeddings.token", {V, E});
  weight("embeddings.position", {P, E});
  weight("embeddings.segment", {2, E});
  norm("embeddings.norm", E);
  if (cfg.factorized()) {
    weight("embeddings.projection.weight", {E, H});
    zeros("embeddings.projection.bias", {H});
  }
  for (int g = 0; g < groups.num_attention_groups; ++g) {
    for (const char* leaf : {"q", "k", "v", "o"}) {
      weight(group_path(g, "attention", (std::string(leaf) + "_weight").c_str()), {H, H});
      zeros(group_path(g, "attention", (std::string(leaf) + "_bias").c_str()), {H});
    }
    norm("group" + std::to_string(g) + ".attention.norm", H);
  }
  for (int g = 0; g < groups.num_ffn_groups; ++g) {
    weight(group_path(g, "ffn", "in_weight"), {H, F});
    zeros(group_path(g, "ffn", "in_bias"), {F});
    weight(group_path(g, "ffn", "out_weight"), {F, H});
    zeros(group_path(g, "ffn", "out_bias"), {H});
    norm("group" + std::to_string(g) + ".ffn.norm", H);
  }
  weight("pooler.weight", {H, H});
  zeros("pooler.bias", {H});
  weight("heads.mlm.transform.weight", {H, E});
  zeros("heads.mlm.transform.bias", {E});
  norm("heads.mlm.norm", E);
  zeros("heads.mlm.output_bias", {V});
  weight("heads.sp.weight", {H, 2});
  zeros("heads.sp.bias", {2});

  for (const std::string& path : ps.paths()) ps.at(path).set_requires_grad(true);
  return ps;
}

ParameterCount count_parameters(const ModelConfig& raw) {
  const ModelConfig cfg = raw.normalized();
  const long long H = cfg.hidden_size, E = cfg.embedding_size, V = cfg.vocab_size;
  const long long F = cfg.ffn_size, P = cfg.max_positions;
  LayerGroups groups = resolve_layer_groups(cfg.sharing, cfg.num_layers, cfg.group_size);

  ParameterCount c;
  c.embeddings = V * E + P * E + 2 * E + 2 * E;  // tables + norm
  if (cfg.factorized()) c.embeddings += E * H + H;
  const long long per_attention = 4 * (H * H + H) + 2 * H;
  const long long per_ffn = (H * F + F) + (F * H + H) + 2 * H;
  c.attention = groups.num_attention_groups * per_attention;
  c.ffn = groups.num_ffn_groups * per_ffn;
  c.pooler = H * H + H;
  c.mlm_head = H * E + E + 2 * E + V;
  c.sp_head = 2 * H + 2;
  return c;
}

// --- forward -------------------------------------------------------------------

ForwardOutput forward(const ParameterStore& params, const ModelConfig& raw, const ModelInput& in,
                      bool training, bool trace, Rng& dropout_rng) {
  const ModelConfig cfg = raw.normalized();
  const int B = in.batch, S = in.seq_len;
  const int H = cfg.hidden_size, A = cfg.num_heads;
  if (B < 1 || S < 1) throw ShapeError("forward needs batch >= 1 and seq_len >= 1");
  if (S > cfg.max_positions) {
    throw ShapeError("sequence length " + std::to_string(S) + " exceeds max_positions " +
                     std::to_string(cfg.max_positions));
  }
  const std::size_t n = static_cast<std::size_t>(B) * static_cast<std::size_t>(S);
  if (in.token_ids.size() != n || in.segment_ids.size() != n || in.attention_mask.size() != n) {
    throw ShapeError("forward inputs must all hold batch*seq_len entries");
  }

  const double p = cfg.dropout_p;
  auto drop = [&](const Tensor& t) { return dropout(t, p, training, dropout_rng); };

  std::vector<int> position_ids(n);
  for (int b = 0; b < B; ++b) {
    for (int s = 0; s < S; ++s) position_ids[static_cast<std::size_t>(b) * S + s] = s;
  }

  Tensor x = add(add(embedding_lookup(params.at("embeddings.token"), in.token_ids, {B, S}),
                     embedding_lookup(params.at("embeddings.position"), position_ids, {B, S})),
                 embedding_lookup(params.at("embeddings.segment"), in.segment_ids, {B, S}));
  x = layer_norm(x, params.at("embeddings.norm.gamma"), params.at("embeddings.norm.beta"),
                 kLayerNormEps);
  x = drop(x);
  if (cfg.factorized()) {
    x = add_bias(matmul(x, params.at("embeddings.projection.weight")),
                 params.at("embeddings.projection.bias"));
  }

  ForwardOutput out;
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(H / A));
  for (int layer = 0; layer < cfg.num_layers; ++layer) {
    if (trace) out.layer_inputs.push_back(x);
    const std::string ag = "group" + std::to_string(params.attention_group_of[layer]);
    const std::string fg = "group" + std::to_string(params.ffn_group_of[layer]);

    Tensor q = add_bias(matmul(x, params.at(ag + ".attention.q_weight")),
                        params.at(ag + ".attention.q_bias"));
    Tensor k = add_bias(matmul(x, params.at(ag + ".attention.k_weight")),
                        params.at(ag + ".attention.k_bias"));
    Tensor v = add_bias(matmul(x, params.at(ag + ".attention.v_weight")),
                        params.at(ag + ".attention.v_bias"));
    Tensor scores = scale(bmm_nt(split_heads(q, A), split_heads(k, A)), scale_factor);
    scores = add_key_padding_mask(scores, in.attention_mask);
    Tensor probs = drop(softmax(scores, -1));
    Tensor context = merge_heads(bmm_nn(probs, split_heads(v, A)));
    Tensor attn = drop(add_bias(matmul(context, params.at(ag + ".attention.o_weight")),
                                params.at(ag + ".attention.o_bias")));
    x = layer_norm(add(x, attn), params.at(ag + ".attention.norm.gamma"),
                   params.at(ag + ".attention.norm.beta"), kLayerNormEps);

    Tensor hidden = gelu(add_bias(matmul(x, params.at(fg + ".ffn.in_weight")),
                                  params.at(fg + ".ffn.in_bias")));
    Tensor ffn_out = drop(add_bias(matmul(hidden, params.at(fg + ".ffn.out_weight")),
                                   params.at(fg + ".ffn.out_bias")));
    x = layer_norm(add(x, ffn_out), params.at(fg + ".ffn.norm.gamma"),
                   params.at(fg + ".ffn.norm.beta"), kLayerNormEps);
    if (trace) out.layer_outputs.push_back(x);
  }
  out.hidden = x;

  out.pooled = tanh_act(
      add_bias(matmul(first_token(x), params.at("pooler.weight")), params.at("pooler.bias")));

  Tensor t = gelu(add_bias(matmul(x, params.at("heads.mlm.transform.weight")),
                           params.at("heads.mlm.transform.bias")));
  t = layer_norm(t, params.at("heads.mlm.norm.gamma"), params.at("heads.mlm.norm.beta"),
                 kLayerNormEps);
  out.mlm_logits = add_bias(matmul_nt(t, params.at("embeddings.token")),  // tied decoder
                            params.at("heads.mlm.output_bias"));
  if (cfg.has_sentence_pair_head_in_loss()) {
    out.sp_logits = add_bias(matmul(out.pooled, params.at("heads.sp.weight")),
                             params.at("heads.sp.bias"));
  }
  return out;
}

Losses pretrain_losses(const ForwardOutput& out, std::span<const int> mlm_targets,
                       std::span<const int> sp_labels, Objective objective) {
  Losses l;
  l.mlm = cross_entropy_logits(out.mlm_logits, mlm_targets, kIgnoreIndex, &l.mlm_all_ignored);
  if (objective != Objective::mlm_only) {
    if (!out.sp_logits.defined()) {
      throw UsageError("objective has a sentence-pair loss but forward produced no sp_logits");
    }
    l.sp = cross_entropy_logits(out.sp_logits, sp_labels, kIgnoreIndex);
    l.total = add(l.mlm, l.sp);
  } else {
    l.total = l.mlm;
  }
  return l;
}

// --- warm start ------------------------------------------------------------------

namespace {

void copy_values(Tensor& dst, const Tensor& src, const std::string& path) {
  if (dst.shape() != src.shape()) {
    throw ConfigError("warm start shape mismatch at '" + path + "': source " +
                      shape_to_string(src.shape()) + ", target " + shape_to_string(dst.shape()));
  }
  std::copy(src.data().begin(), src.data().end(), dst.data().begin());
}

}  // namespace

ParameterStore warm_start_expand(const ModelConfig& source_raw, const ParameterStore& source,
                                 const ModelConfig& target_raw) {
  const ModelConfig s = source_raw.normalized();
  const ModelConfig t = target_raw.normalized();
  auto need_eq = [](long long a, long long b, const char* field) {
    if (a != b) {
      throw ConfigError(std::string("warm start mismatch on ") + field + ": source " +
                        std::to_string(a) + ", target " + std::to_string(b));
    }
  };
  need_eq(s.hidden_size, t.hidden_size, "hidden_size");
  need_eq(s.embedding_size, t.embedding_size, "embedding_size");
  need_eq(s.vocab_size, t.vocab_size, "vocab_size");
  need_eq(s.num_heads, t.num_heads, "num_heads");
  need_eq(s.ffn_size, t.ffn_size, "ffn_size");
  need_eq(s.max_positions, t.max_positions, "max_positions");
  need_eq(s.factorized() ? 1 : 0, t.factorized() ? 1 : 0, "factorize_embedding");
  if (t.num_layers < s.num_layers) {
    throw ConfigError("warm start target num_layers " + std::to_string(t.num_layers) +
                      " < source " + std::to_string(s.num_layers));
  }

  ParameterStore target = build_model(t, /*seed=*/0);

  // non-layer tensors copy one-to-one
  for (const std::string& path : target.paths()) {
    if (path.rfind("group", 0) == 0) continue;
    copy_values(target.at(path), source.at(path), path);
  }

  // target layer i draws from source layer (i mod source_L); a whole target
  // group copies from the group of its first member layer
  auto copy_block = [&](const std::vector<int>& tgt_map, const std::vector<int>& src_map,
                        const char* block, const std::vector<std::string>& leaves) {
    int num_groups = *std::max_element(tgt_map.begin(), tgt_map.end()) + 1;
    for (int g = 0; g < num_groups; ++g) {
      int first_layer = -1;
      for (int i = 0; i < t.num_layers; ++i) {
        if (tgt_map[i] == g) {
          first_layer = i;
          break;
        }
      }
      const int sg = src_map[first_layer % s.num_layers];
      for (const std::string& leaf : leaves) {
        const std::string from = "group" + std::to_string(sg) + "." + block + "." + leaf;
        const std::string to = "group" + std::to_string(g) + "." + block + "." + leaf;
        copy_values(target.at(to), source.at(from), to);
      }
    }
  };
  copy_block(target.attention_group_of, source.attention_group_of, "attention",
             {"q_weight", "q_bias", "k_weight", "k_bias", "v_weight", "v_bias", "o_weight",
              "o_bias", "norm.gamma", "norm.beta"});
  copy_block(target.ffn_group_of, source.ffn_group_of, "ffn",
             {"in_weight", "in_bias", "out_weight", "out_bias", "norm.gamma", "norm.beta"});
  return target;
}

}  // namespace albert
