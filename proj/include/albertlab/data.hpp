#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "albertlab/common.hpp"
#include "albertlab/model.hpp"

namespace albert {

// fixed special-token ids at the front of every vocabulary
inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kClsId = 2;
inline constexpr int kSepId = 3;
inline constexpr int kMaskId = 4;
inline constexpr int kNumSpecials = 5;
extern const std::array<const char*, kNumSpecials> kSpecialTokens;

/// Lowercased whitespace word split.
std::vector<std::string> tokenize(const std::string& line);

class Vocabulary {
 public:
  /// Specials first, then words by descending frequency (ties keep first
  /// occurrence order), truncated to max_size entries total. Throws DataError
  /// when max_size < kNumSpecials + 1 or the corpus has no tokens.
  static Vocabulary build(const std::vector<std::string>& corpus_tokens, std::size_t max_size);

  int id_of(const std::string& token) const;  // kUnkId for unknown words
  const std::string& token_of(int id) const;
  std::size_t size() const { return tokens_.size(); }
  std::vector<int> encode(const std::vector<std::string>& tokens) const;

  void save(const std::string& path) const;  // one token per line, id order
  static Vocabulary load(const std::string& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

// One document: its lines as tokenized segments.
struct RawDocument {
  std::vector<std::vector<std::string>> segments;
};

// The same document with every segment encoded to ids.
struct Document {
  std::vector<std::vector<int>> segments;
};

/// Blank lines split documents; every other line is one segment.
/// Whitespace-only lines count as blank; documents with no segments are
/// dropped. An empty result sets *warned_empty (the CLI prints the warning).
std::vector<RawDocument> read_documents(std::istream& in, bool* warned_empty = nullptr);
std::vector<RawDocument> read_documents_file(const std::string& path,
                                             bool* warned_empty = nullptr);

std::vector<Document> encode_documents(const std::vector<RawDocument>& docs,
                                       const Vocabulary& vocab);
std::vector<std::string> flatten_tokens(const std::vector<RawDocument>& docs);

struct MaskingConfig {
  double budget = 0.15;   // fraction of usable tokens to cover
  int max_span = 3;       // n-gram cap N
  double mask_prob = 0.8;  // per span: [MASK]
  double random_prob = 0.1;  // per span: random word id (rest keep original)

  void validate() const;  // throws ConfigError
};

MaskingConfig masking_config_from_json(const nlohmann::json& j);
nlohmann::json masking_config_to_json(const MaskingConfig& cfg);

/// Span length n in [1, max_span] with p(n) proportional to 1/n.
int sample_span_length(int max_span, Rng& rng);

inline constexpr int kNoLabel = -1;

struct TrainingInstance {
  std::vector<int> token_ids;    // [CLS] ... [SEP] (... [SEP]) after packing
  std::vector<int> segment_ids;  // 0 for first segment span, 1 for second
  std::vector<int> masked_positions;  // ascending
  std::vector<int> masked_targets;    // original ids, aligned with positions
  int sp_label = kNoLabel;            // 1 positive, 0 negative, kNoLabel absent
  bool masking_skipped = false;       // no usable tokens to mask
};

/// Draws n-gram spans over usable tokens (anything but [PAD]/[CLS]/[SEP]/
/// [MASK]) until ceil(budget * usable) positions are covered, truncating
/// spans at segment boundaries and already-masked runs. Each span is wholly
/// masked, replaced with random words, or kept (mask_prob/random_prob/rest).
/// Targets hold the original ids. No usable tokens: sets masking_skipped.
/// Already-masked instances are a UsageError. Appends every drawn span
/// length to *span_length_log when given.
void apply_masking(TrainingInstance& inst, const MaskingConfig& cfg, int vocab_size, Rng& rng,
                   std::vector<int>* span_length_log = nullptr);

// Provenance of one generated instance, for invariant checks.
struct PairDebug {
  int doc_index = -1;
  int seg_index = -1;        // first segment of the consecutive pair
  int other_doc_index = -1;  // NSP negatives: source of the replacement
  int other_seg_index = -1;
  bool negative = false;
  bool swapped = false;  // SOP negatives
  int target_len = 0;    // packed length cap after the short-sequence draw
};

/// Streams unmasked instances from encoded documents. Pair objectives draw a
/// uniform consecutive segment pair (positive with probability 1/2; SOP
/// negatives swap the pair, NSP negatives replace the second segment with one
/// from another document). mlm_only draws single segments. With probability
/// short_prob the packed length is capped at a uniform draw from
/// [16, max_len - 1]; the longer segment truncates from its tail first (ties
/// trim the second). Throws DataError when the corpus cannot support the
/// objective.
class InstanceGenerator {
 public:
  InstanceGenerator(std::vector<Document> docs, Objective objective, int max_len,
                    double short_prob);

  TrainingInstance next(Rng& rng, PairDebug* debug = nullptr) const;

 private:
  std::vector<Document> docs_;
  Objective objective_;
  int max_len_;
  double short_prob_;
  std::vector<int> pair_docs_;    // indices of docs with >= 2 segments
  std::vector<int> seg_docs_;     // indices of docs with >= 1 segment
};

struct Batch {
  int batch = 0;
  int seq_len = 0;
  std::vector<int> token_ids;
  std::vector<int> segment_ids;
  std::vector<std::uint8_t> attention_mask;  // 1 = real token
  std::vector<int> mlm_targets;              // B*S, kIgnoreIndex when unmasked
  std::vector<int> sp_labels;                // B, kIgnoreIndex when absent

  ModelInput input() const;
};

/// Right-pads every instance to the longest in the batch with [PAD]. An
/// instance longer than max_len is a DataError; an empty batch a UsageError.
Batch pack_batch(const std::vector<TrainingInstance>& instances, int max_len);

nlohmann::json instance_to_json(const TrainingInstance& inst);
TrainingInstance instance_from_json(const nlohmann::json& j);
void write_instances_jsonl(const std::string& path, const std::vector<TrainingInstance>& v);
std::vector<TrainingInstance> read_instances_jsonl(const std::string& path);

/// Structural checks (lengths, id ranges, sorted unique positions, label
/// domain); throws DataError naming the defect.
void validate_instance(const TrainingInstance& inst, int vocab_size, int max_len);

}  // namespace albert
