#include "albertlab/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

namespace albert {

const std::array<const char*, kNumSpecials> kSpecialTokens = {"[PAD]", "[UNK]", "[CLS]", "[SEP]",
                                                              "[MASK]"};

std::vector<std::string> tokenize(const std::string& line) {
  std::vector<std::string> out;
  std::string word;
  for (char ch : line) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!word.empty()) out.push_back(std::move(word)), word.clear();
    } else {
      word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!word.empty()) out.push_back(std::move(word));
  return out;
}

// --- vocabulary ------------------------------------------------------------

Vocabulary Vocabulary::build(const std::vector<std::string>& corpus_tokens,
                             std::size_t max_size) {
  if (max_size < kNumSpecials + 1) {
    throw DataError("vocabulary max_size " + std::to_string(max_size) +
                    " cannot hold the special tokens plus a word");
  }
  if (corpus_tokens.empty()) throw DataError("cannot build a vocabulary from an empty corpus");

  struct Entry {
    long long count = 0;
    std::size_t first = 0;
  };
  std::unordered_map<std::string, Entry> freq;
  for (std::size_t i = 0; i < corpus_tokens.size(); ++i) {
    auto [it, inserted] = freq.try_emplace(corpus_tokens[i]);
    if (inserted) it->second.first = i;
    ++it->second.count;
  }
  std::vector<const std::pair<const std::string, Entry>*> order;
  order.reserve(freq.size());
  for (const auto& kv : freq) order.push_back(&kv);
  std::sort(order.begin(), order.end(), [](const auto* a, const auto* b) {
    if (a->second.count != b->second.count) return a->second.count > b->second.count;
    return a->second.first < b->second.first;
  });

  Vocabulary v;
  for (const char* s : kSpecialTokens) v.tokens_.emplace_back(s);
  for (const auto* kv : order) {
    if (v.tokens_.size() >= max_size) break;
    v.tokens_.push_back(kv->first);
  }
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) v.index_[v.tokens_[i]] = static_cast<int>(i);
  return v;
}

int Vocabulary::id_of(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token_of(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw DataError("vocabulary id " + std::to_string(id) + " out of range [0, " +
                    std::to_string(tokens_.size()) + ")");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const std::string& t : tokens) ids.push_back(id_of(t));
  return ids;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write vocabulary '" + path + "'");
  for (const std::string& t : tokens_) out << t << "\n";
  out.flush();
  if (!out) throw IoError("cannot write vocabulary '" + path + "'");
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open vocabulary '" + path + "'");
  Vocabulary v;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (v.index_.count(line)) throw DataError("duplicate vocabulary entry '" + line + "'");
    v.index_[line] = static_cast<int>(v.tokens_.size());
    v.tokens_.push_back(line);
  }
  if (v.tokens_.size() < kNumSpecials) {
    throw DataError("vocabulary '" + path + "' is missing the special tokens");
  }
  for (int i = 0; i < kNumSpecials; ++i) {
    if (v.tokens_[static_cast<std::size_t>(i)] != kSpecialTokens[static_cast<std::size_t>(i)]) {
      throw DataError("vocabulary '" + path + "' does not start with the special tokens");
    }
  }
  return v;
}

// --- documents ---------------------------------------------------------------

std::vector<RawDocument> read_documents(std::istream& in, bool* warned_empty) {
  std::vector<RawDocument> docs;
  RawDocument current;
  auto flush = [&] {
    if (!current.segments.empty()) docs.push_back(std::move(current));
    current = RawDocument{};
  };
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> tokens = tokenize(line);
    if (tokens.empty()) {
      flush();  // blank (or whitespace-only) line ends the document
    } else {
      current.segments.push_back(std::move(tokens));
    }
  }
  flush();
  if (warned_empty) *warned_empty = docs.empty();
  return docs;
}

std::vector<RawDocument> read_documents_file(const std::string& path, bool* warned_empty) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus '" + path + "'");
  return read_documents(in, warned_empty);
}

std::vector<Document> encode_documents(const std::vector<RawDocument>& docs,
                                       const Vocabulary& vocab) {
  std::vector<Document> out;
  out.reserve(docs.size());
  for (const RawDocument& d : docs) {
    Document e;
    e.segments.reserve(d.segments.size());
    for (const auto& seg : d.segments) e.segments.push_back(vocab.encode(seg));
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<std::string> flatten_tokens(const std::vector<RawDocument>& docs) {
  std::vector<std::string> out;
  for (const RawDocument& d : docs) {
    for (const auto& seg : d.segments) out.insert(out.end(), seg.begin(), seg.end());
  }
  return out;
}

// --- masking ---------------------------------------------------------------------

void MaskingConfig::validate() const {
  if (!(budget > 0.0) || budget > 1.0) throw ConfigError("masking budget must be in (0, 1]");
  if (max_span < 1) throw ConfigError("masking max_span must be >= 1");
  if (mask_prob < 0.0 || random_prob < 0.0 || mask_prob + random_prob > 1.0 + 1e-12) {
    throw ConfigError("masking mask_prob/random_prob must be nonnegative and sum to <= 1");
  }
}

MaskingConfig masking_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("masking config must be a JSON object");
  MaskingConfig c;
  try {
    for (const auto& item : j.items()) {
      if (item.key() == "budget") {
        c.budget = item.value().get<double>();
      } else if (item.key() == "max_span") {
        c.max_span = item.value().get<int>();
      } else if (item.key() == "mask_prob") {
        c.mask_prob = item.value().get<double>();
      } else if (item.key() == "random_prob") {
        c.random_prob = item.value().get<double>();
      } else {
        throw ConfigError("unknown masking config key '" + item.key() + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad masking config value: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json masking_config_to_json(const MaskingConfig& cfg) {
  return {{"budget", cfg.budget},
          {"max_span", cfg.max_span},
          {"mask_prob", cfg.mask_prob},
          {"random_prob", cfg.random_prob}};
}

int sample_span_length(int max_span, Rng& rng) {
  if (max_span < 1) throw UsageError("max_span must be >= 1");
  double total = 0.0;
  for (int n = 1; n <= max_span; ++n) total += 1.0 / n;
  double u = rng.uniform() * total;
  double acc = 0.0;
  for (int n = 1; n <= max_span; ++n) {
    acc += 1.0 / n;
    if (u < acc) return n;
  }
  return max_span;
}

namespace {

bool maskable_id(int id) {
  return id != kPadId && id != kClsId && id != kSepId && id != kMaskId;
}

}  // namespace

void apply_masking(TrainingInstance& inst, const MaskingConfig& cfg, int vocab_size, Rng& rng,
                   std::vector<int>* span_length_log) {
  cfg.validate();
  if (!inst.masked_positions.empty() || !inst.masked_targets.empty()) {
    throw UsageError("instance is already masked");
  }
  if (vocab_size <= kNumSpecials) {
    throw ConfigError("vocab_size " + std::to_string(vocab_size) + " leaves no word ids");
  }
  const std::vector<int> original = inst.token_ids;
  const int len = static_cast<int>(original.size());

  std::vector<int> open;  // maskable positions not yet covered, ascending
  for (int i = 0; i < len; ++i) {
    if (maskable_id(original[static_cast<std::size_t>(i)])) open.push_back(i);
  }
  const int usable = static_cast<int>(open.size());
  if (usable == 0) {
    inst.masking_skipped = true;
    return;
  }
  const int target = std::min<int>(
      usable, static_cast<int>(std::ceil(cfg.budget * static_cast<double>(usable))));

  std::vector<char> covered(static_cast<std::size_t>(len), 0);
  std::vector<std::pair<int, int>> picked;  // (position, original id)
  int covered_count = 0;
  while (covered_count < target) {
    const int n = sample_span_length(cfg.max_span, rng);
    if (span_length_log) span_length_log->push_back(n);
    const int start_idx = rng.uniform_int(0, static_cast<int>(open.size()) - 1);
    const int start = open[static_cast<std::size_t>(start_idx)];

    std::vector<int> span;
    for (int pos = start; pos < len && static_cast<int>(span.size()) < n; ++pos) {
      if (!maskable_id(original[static_cast<std::size_t>(pos)]) ||
          covered[static_cast<std::size_t>(pos)]) {
        break;  // spans stop at specials, padding, and already-masked runs
      }
      span.push_back(pos);
    }

    const double u = rng.uniform();
    for (int pos : span) {
      covered[static_cast<std::size_t>(pos)] = 1;
      picked.emplace_back(pos, original[static_cast<std::size_t>(pos)]);
      if (u < cfg.mask_prob) {
        inst.token_ids[static_cast<std::size_t>(pos)] = kMaskId;
      } else if (u < cfg.mask_prob + cfg.random_prob) {
        inst.token_ids[static_cast<std::size_t>(pos)] = rng.uniform_int(kNumSpecials,
                                                                        vocab_size - 1);
      }  // else keep the original token
    }
    covered_count += static_cast<int>(span.size());
    open.erase(std::remove_if(open.begin(), open.end(),
                              [&](int p) { return covered[static_cast<std::size_t>(p)]; }),
               open.end());
  }

  std::sort(picked.begin(), picked.end());
  inst.masked_positions.reserve(picked.size());
  inst.masked_targets.reserve(picked.size());
  for (const auto& [pos, id] : picked) {
    inst.masked_positions.push_back(pos);
    inst.masked_targets.push_back(id);
  }
}

// --- instance generation ---------------------------------------------------------

InstanceGenerator::InstanceGenerator(std::vector<Document> docs, Objective objective, int max_len,
                                     double short_prob)
    : docs_(std::move(docs)), objective_(objective), max_len_(max_len), short_prob_(short_prob) {
  const int overhead = objective_ == Objective::mlm_only ? 2 : 3;
  if (max_len_ < overhead + 2) {
    throw ConfigError("max_len " + std::to_string(max_len_) + " cannot hold an instance");
  }
  if (short_prob_ < 0.0 || short_prob_ > 1.0) throw ConfigError("short_prob must be in [0, 1]");
  if (short_prob_ > 0.0 && max_len_ < 17) {
    throw ConfigError("short sequences draw lengths from [16, max_len-1]; max_len " +
                      std::to_string(max_len_) + " is too small");
  }
  for (std::size_t i = 0; i < docs_.size(); ++i) {
    std::size_t segs = 0;
    for (const auto& s : docs_[i].segments) {
      if (!s.empty()) ++segs;
    }
    if (segs != docs_[i].segments.size()) {
      throw DataError("document " + std::to_string(i) + " contains an empty segment");
    }
    if (segs >= 1) seg_docs_.push_back(static_cast<int>(i));
    if (segs >= 2) pair_docs_.push_back(static_cast<int>(i));
  }
  if (objective_ == Objective::mlm_only) {
    if (seg_docs_.empty()) throw DataError("corpus has no segments");
  } else {
    if (pair_docs_.empty()) {
      throw DataError("sentence-pair objectives need a document with two consecutive segments");
    }
    if (objective_ == Objective::mlm_nsp && seg_docs_.size() < 2) {
      throw DataError("nsp negatives need segments from at least two documents");
    }
  }
}

TrainingInstance InstanceGenerator::next(Rng& rng, PairDebug* debug) const {
  TrainingInstance inst;
  PairDebug dbg;

  if (objective_ == Objective::mlm_only) {
    const int doc = seg_docs_[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<int>(seg_docs_.size()) - 1))];
    const auto& segs = docs_[static_cast<std::size_t>(doc)].segments;
    const int k = rng.uniform_int(0, static_cast<int>(segs.size()) - 1);
    std::vector<int> x = segs[static_cast<std::size_t>(k)];

    int target = max_len_;
    if (short_prob_ > 0.0 && rng.bernoulli(short_prob_)) target = rng.uniform_int(16, max_len_ - 1);
    const std::size_t avail = static_cast<std::size_t>(target - 2);
    if (x.size() > avail) x.resize(avail);

    inst.token_ids.push_back(kClsId);
    inst.token_ids.insert(inst.token_ids.end(), x.begin(), x.end());
    inst.token_ids.push_back(kSepId);
    inst.segment_ids.assign(inst.token_ids.size(), 0);
    dbg.doc_index = doc;
    dbg.seg_index = k;
    dbg.target_len = target;
    if (debug) *debug = dbg;
    return inst;
  }

  const int doc = pair_docs_[static_cast<std::size_t>(
      rng.uniform_int(0, static_cast<int>(pair_docs_.size()) - 1))];
  const auto& segs = docs_[static_cast<std::size_t>(doc)].segments;
  const int k = rng.uniform_int(0, static_cast<int>(segs.size()) - 2);
  std::vector<int> x1 = segs[static_cast<std::size_t>(k)];
  std::vector<int> x2 = segs[static_cast<std::size_t>(k + 1)];
  dbg.doc_index = doc;
  dbg.seg_index = k;

  const bool positive = rng.bernoulli(0.5);
  dbg.negative = !positive;
  if (!positive) {
    if (objective_ == Objective::mlm_sop) {
      std::swap(x1, x2);
      dbg.swapped = true;
    } else {
      std::vector<int> others;
      for (int d : seg_docs_) {
        if (d != doc) others.push_back(d);
      }
      const int od = others[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<int>(others.size()) - 1))];
      const auto& osegs = docs_[static_cast<std::size_t>(od)].segments;
      const int os = rng.uniform_int(0, static_cast<int>(osegs.size()) - 1);
      x2 = osegs[static_cast<std::size_t>(os)];
      dbg.other_doc_index = od;
      dbg.other_seg_index = os;
    }
  }

  int target = max_len_;
  if (short_prob_ > 0.0 && rng.bernoulli(short_prob_)) target = rng.uniform_int(16, max_len_ - 1);
  dbg.target_len = target;
  const std::size_t avail = static_cast<std::size_t>(target - 3);
  while (x1.size() + x2.size() > avail) {
    if (x1.size() > x2.size()) {
      x1.pop_back();
    } else {
      x2.pop_back();  // ties trim the second segment
    }
  }

  inst.token_ids.push_back(kClsId);
  inst.token_ids.insert(inst.token_ids.end(), x1.begin(), x1.end());
  inst.token_ids.push_back(kSepId);
  const std::size_t first_span = inst.token_ids.size();
  inst.token_ids.insert(inst.token_ids.end(), x2.begin(), x2.end());
  inst.token_ids.push_back(kSepId);
  inst.segment_ids.assign(first_span, 0);
  inst.segment_ids.resize(inst.token_ids.size(), 1);
  inst.sp_label = positive ? 1 : 0;
  if (debug) *debug = dbg;
  return inst;
}

// --- batching ------------------------------------------------------------------

ModelInput Batch::input() const {
  return ModelInput{batch, seq_len, token_ids, segment_ids, attention_mask};
}

Batch pack_batch(const std::vector<TrainingInstance>& instances, int max_len) {
  if (instances.empty()) throw UsageError("cannot pack an empty batch");
  std::size_t longest = 0;
  for (const TrainingInstance& inst : instances) {
    if (inst.token_ids.empty()) throw DataError("cannot pack an empty instance");
    if (inst.token_ids.size() != inst.segment_ids.size()) {
      throw DataError("instance token/segment length mismatch");
    }
    if (static_cast<int>(inst.token_ids.size()) > max_len) {
      throw DataError("instance length " + std::to_string(inst.token_ids.size()) +
                      " exceeds max_len " + std::to_string(max_len));
    }
    longest = std::max(longest, inst.token_ids.size());
  }

  Batch b;
  b.batch = static_cast<int>(instances.size());
  b.seq_len = static_cast<int>(longest);
  const std::size_t n = instances.size() * longest;
  b.token_ids.assign(n, kPadId);
  b.segment_ids.assign(n, 0);
  b.attention_mask.assign(n, 0);
  b.mlm_targets.assign(n, kIgnoreIndex);
  b.sp_labels.reserve(instances.size());
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const TrainingInstance& inst = instances[i];
    const std::size_t row = i * longest;
    std::copy(inst.token_ids.begin(), inst.token_ids.end(), b.token_ids.begin() + row);
    std::copy(inst.segment_ids.begin(), inst.segment_ids.end(), b.segment_ids.begin() + row);
    std::fill_n(b.attention_mask.begin() + row, inst.token_ids.size(), std::uint8_t{1});
    if (inst.masked_positions.size() != inst.masked_targets.size()) {
      throw DataError("instance masked position/target length mismatch");
    }
    for (std::size_t m = 0; m < inst.masked_positions.size(); ++m) {
      const int pos = inst.masked_positions[m];
      if (pos < 0 || pos >= static_cast<int>(inst.token_ids.size())) {
        throw DataError("masked position " + std::to_string(pos) + " outside the instance");
      }
      b.mlm_targets[row + static_cast<std::size_t>(pos)] = inst.masked_targets[m];
    }
    b.sp_labels.push_back(inst.sp_label == kNoLabel ? kIgnoreIndex : inst.sp_label);
  }
  return b;
}

// --- jsonl -----------------------------------------------------------------------

nlohmann::json instance_to_json(const TrainingInstance& inst) {
  nlohmann::json j;
  j["token_ids"] = inst.token_ids;
  j["segment_ids"] = inst.segment_ids;
  j["masked_positions"] = inst.masked_positions;
  j["masked_targets"] = inst.masked_targets;
  j["sp_label"] = inst.sp_label == kNoLabel ? nlohmann::json() : nlohmann::json(inst.sp_label);
  return j;
}

TrainingInstance instance_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw DataError("instance must be a JSON object");
  TrainingInstance inst;
  try {
    inst.token_ids = j.at("token_ids").get<std::vector<int>>();
    inst.segment_ids = j.at("segment_ids").get<std::vector<int>>();
    inst.masked_positions = j.at("masked_positions").get<std::vector<int>>();
    inst.masked_targets = j.at("masked_targets").get<std::vector<int>>();
    const auto& label = j.at("sp_label");
    inst.sp_label = label.is_null() ? kNoLabel : label.get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad instance json: ") + e.what());
  }
  return inst;
}

void write_instances_jsonl(const std::string& path, const std::vector<TrainingInstance>& v) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write instances '" + path + "'");
  for (const TrainingInstance& inst : v) out << instance_to_json(inst).dump() << "\n";
  out.flush();
  if (!out) throw IoError("cannot write instances '" + path + "'");
}

std::vector<TrainingInstance> read_instances_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open instances '" + path + "'");
  std::vector<TrainingInstance> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    out.push_back(instance_from_json(j));
  }
  return out;
}

void validate_instance(const TrainingInstance& inst, int vocab_size, int max_len) {
  const std::size_t len = inst.token_ids.size();
  if (len == 0) throw DataError("instance has no tokens");
  if (static_cast<int>(len) > max_len) {
    throw DataError("instance length " + std::to_string(len) + " exceeds max_len " +
                    std::to_string(max_len));
  }
  if (inst.segment_ids.size() != len) throw DataError("segment_ids length mismatch");
  for (int id : inst.token_ids) {
    if (id < 0 || id >= vocab_size) throw DataError("token id " + std::to_string(id) +
                                                    " outside the vocabulary");
  }
  for (int s : inst.segment_ids) {
    if (s != 0 && s != 1) throw DataError("segment id " + std::to_string(s) + " is not 0 or 1");
  }
  if (inst.masked_positions.size() != inst.masked_targets.size()) {
    throw DataError("masked position/target length mismatch");
  }
  for (std::size_t i = 0; i < inst.masked_positions.size(); ++i) {
    const int pos = inst.masked_positions[i];
    if (pos < 0 || pos >= static_cast<int>(len)) {
      throw DataError("masked position " + std::to_string(pos) + " outside the instance");
    }
    if (i > 0 && pos <= inst.masked_positions[i - 1]) {
      throw DataError("masked positions must be strictly ascending");
    }
    const int t = inst.masked_targets[i];
    if (t < 0 || t >= vocab_size) {
      throw DataError("masked target " + std::to_string(t) + " outside the vocabulary");
    }
  }
  if (inst.sp_label != kNoLabel && inst.sp_label != 0 && inst.sp_label != 1) {
    throw DataError("sp_label must be 0, 1, or absent");
  }
}

}  // namespace albert
