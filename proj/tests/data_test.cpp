#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "albertlab/data.hpp"
#include "support.hpp"

using namespace albert;
using testsupport::TempDir;

namespace {

// documents of word ids (>= kNumSpecials) for generator tests
std::vector<Document> toy_documents(int num_docs, int segs_per_doc, int seg_len) {
  std::vector<Document> docs(num_docs);
  int next = kNumSpecials;
  for (Document& d : docs) {
    for (int s = 0; s < segs_per_doc; ++s) {
      std::vector<int> seg(seg_len);
      for (int& id : seg) id = next++;
      d.segments.push_back(std::move(seg));
    }
  }
  return docs;
}

int max_word_id(const std::vector<Document>& docs) {
  int m = kNumSpecials;
  for (const Document& d : docs) {
    for (const auto& s : d.segments) {
      for (int id : s) m = std::max(m, id);
    }
  }
  return m;
}

}  // namespace

TEST_CASE("tokenize lowercases and splits on whitespace") {
  CHECK(tokenize("Hello  WORLD\tFoo\r") == std::vector<std::string>{"hello", "world", "foo"});
  CHECK(tokenize("  one ") == std::vector<std::string>{"one"});
  CHECK(tokenize("").empty());
  CHECK(tokenize(" \t ").empty());
}

TEST_CASE("vocabulary build, order, and lookup") {
  Vocabulary v = Vocabulary::build(tokenize("a b a"), 8);
  CHECK(v.size() == 7);
  for (int i = 0; i < kNumSpecials; ++i) CHECK(v.token_of(i) == kSpecialTokens[i]);
  CHECK(v.id_of("a") == 5);
  CHECK(v.id_of("b") == 6);
  CHECK(v.id_of("missing") == kUnkId);
  CHECK_THROWS_AS(v.token_of(7), DataError);
  CHECK_THROWS_AS(v.token_of(-1), DataError);
  CHECK(v.encode({"b", "zzz", "a"}) == std::vector<int>{6, kUnkId, 5});

  SUBCASE("frequency order with first-occurrence ties") {
    Vocabulary w = Vocabulary::build(tokenize("b a c a b x"), 16);
    CHECK(w.id_of("b") == 5);  // count 2, first seen before a
    CHECK(w.id_of("a") == 6);
    CHECK(w.id_of("c") == 7);  // count 1, before x
    CHECK(w.id_of("x") == 8);
  }
  SUBCASE("max_size truncates the tail") {
    Vocabulary w = Vocabulary::build(tokenize("a a b b c"), 7);
    CHECK(w.size() == 7);
    CHECK(w.id_of("a") == 5);
    CHECK(w.id_of("b") == 6);
    CHECK(w.id_of("c") == kUnkId);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(Vocabulary::build(tokenize("a"), 5), DataError);
    CHECK_THROWS_AS(Vocabulary::build({}, 100), DataError);
  }
  SUBCASE("save and load round trip") {
    TempDir tmp("vocab");
    const std::string path = tmp.file("vocab.txt");
    v.save(path);
    Vocabulary back = Vocabulary::load(path);
    CHECK(back.size() == v.size());
    CHECK(back.id_of("a") == 5);
    CHECK(back.token_of(0) == "[PAD]");

    testsupport::write_file(path, "not\nthe\nspecials\n");
    CHECK_THROWS_AS(Vocabulary::load(path), DataError);
  }
}

TEST_CASE("document reading splits on blank lines") {
  std::istringstream in("First sentence here\nsecond SENTENCE\n   \nlone line\n\n\nlast doc\n");
  bool warned = true;
  std::vector<RawDocument> docs = read_documents(in, &warned);
  CHECK_FALSE(warned);
  REQUIRE(docs.size() == 3);
  REQUIRE(docs[0].segments.size() == 2);
  CHECK(docs[0].segments[0] == std::vector<std::string>{"first", "sentence", "here"});
  CHECK(docs[0].segments[1] == std::vector<std::string>{"second", "sentence"});
  CHECK(docs[1].segments.size() == 1);
  CHECK(docs[2].segments[0] == std::vector<std::string>{"last", "doc"});

  CHECK(flatten_tokens(docs).size() == 9);

  SUBCASE("empty input warns") {
    std::istringstream empty("");
    bool flag = false;
    CHECK(read_documents(empty, &flag).empty());
    CHECK(flag);
    std::istringstream blank("\n  \n\n");
    flag = false;
    CHECK(read_documents(blank, &flag).empty());
    CHECK(flag);
  }
  SUBCASE("file variant") {
    TempDir tmp("docs");
    const std::string path = tmp.file("corpus.txt");
    testsupport::write_file(path, "one two\n\nthree\n");
    CHECK(read_documents_file(path).size() == 2);
    CHECK_THROWS_AS(read_documents_file(tmp.file("absent.txt")), IoError);
  }
  SUBCASE("encoding maps through the vocabulary") {
    Vocabulary v = Vocabulary::build(flatten_tokens(docs), 8);  // keeps 3 words
    std::vector<Document> enc = encode_documents(docs, v);
    REQUIRE(enc.size() == 3);
    CHECK(enc[0].segments[0].size() == 3);
    for (int id : enc[0].segments[0]) CHECK(id >= kUnkId);
  }
}

TEST_CASE("span length distribution follows the inverse-length weights") {
  Rng rng(31);
  const int draws = 20000;
  std::array<int, 4> counts{};
  for (int i = 0; i < draws; ++i) {
    int n = sample_span_length(3, rng);
    REQUIRE(n >= 1);
    REQUIRE(n <= 3);
    ++counts[static_cast<std::size_t>(n)];
  }
  const double denom = 1.0 + 0.5 + 1.0 / 3.0;
  CHECK(std::abs(counts[1] / double(draws) - 1.0 / denom) < 0.02);
  CHECK(std::abs(counts[2] / double(draws) - 0.5 / denom) < 0.02);
  CHECK(std::abs(counts[3] / double(draws) - (1.0 / 3.0) / denom) < 0.02);

  Rng one(5);
  for (int i = 0; i < 100; ++i) CHECK(sample_span_length(1, one) == 1);
  CHECK_THROWS_AS(sample_span_length(0, one), UsageError);
}

TEST_CASE("masking covers the budget with span structure") {
  MaskingConfig mc;  // budget .15, spans up to 3
  const int vocab = 64;

  auto fresh_instance = [&](int words_per_seg) {
    TrainingInstance inst;
    inst.token_ids.push_back(kClsId);
    for (int i = 0; i < words_per_seg; ++i) inst.token_ids.push_back(5 + (i % (vocab - 5)));
    inst.token_ids.push_back(kSepId);
    for (int i = 0; i < words_per_seg; ++i) inst.token_ids.push_back(5 + ((i * 7) % (vocab - 5)));
    inst.token_ids.push_back(kSepId);
    inst.segment_ids.assign(inst.token_ids.size(), 0);
    return inst;
  };

  SUBCASE("fraction stays within [budget, budget + N/usable]") {
    Rng rng(77);
    for (int trial = 0; trial < 500; ++trial) {
      TrainingInstance inst = fresh_instance(20);
      const int usable = 40;
      apply_masking(inst, mc, vocab, rng);
      const double frac = inst.masked_positions.size() / double(usable);
      CHECK(frac >= mc.budget);
      CHECK(frac <= mc.budget + double(mc.max_span) / usable);
    }
  }
  SUBCASE("positions are sorted, unique, and never specials; targets original") {
    Rng rng(78);
    TrainingInstance inst = fresh_instance(20);
    const TrainingInstance before = inst;
    apply_masking(inst, mc, vocab, rng);
    REQUIRE_FALSE(inst.masked_positions.empty());
    std::set<int> seen;
    for (std::size_t i = 0; i < inst.masked_positions.size(); ++i) {
      const int pos = inst.masked_positions[i];
      CHECK(seen.insert(pos).second);
      if (i > 0) CHECK(pos > inst.masked_positions[i - 1]);
      CHECK(before.token_ids[pos] >= kNumSpecials);  // never a special position
      CHECK(inst.masked_targets[i] == before.token_ids[pos]);
    }
    // unmasked positions are untouched
    for (std::size_t p = 0; p < inst.token_ids.size(); ++p) {
      if (!seen.count(static_cast<int>(p))) CHECK(inst.token_ids[p] == before.token_ids[p]);
    }
  }
  SUBCASE("corruption mix approaches 80/10/10 per span") {
    Rng rng(79);
    long long mask = 0, kept = 0, random = 0, spans = 0;
    std::vector<int> lengths;
    for (int trial = 0; trial < 3000; ++trial) {
      TrainingInstance inst = fresh_instance(20);
      const TrainingInstance before = inst;
      std::size_t log_start = lengths.size();
      apply_masking(inst, mc, vocab, rng, &lengths);
      spans += static_cast<long long>(lengths.size() - log_start);
      for (std::size_t i = 0; i < inst.masked_positions.size(); ++i) {
        const int pos = inst.masked_positions[i];
        if (inst.token_ids[pos] == kMaskId) {
          ++mask;
        } else if (inst.token_ids[pos] == before.token_ids[pos]) {
          ++kept;
        } else {
          ++random;
        }
      }
    }
    const double total = double(mask + kept + random);
    CHECK(mask / total == doctest::Approx(0.8).epsilon(0.03));
    // random draws collide with the original id ~1/59 of the time
    CHECK(kept / total == doctest::Approx(0.1).epsilon(0.25));
    CHECK(random / total == doctest::Approx(0.1).epsilon(0.25));
    CHECK(spans == doctest::Approx(lengths.size()).epsilon(1e-12));
  }
  SUBCASE("nothing usable sets the skip flag") {
    TrainingInstance inst;
    inst.token_ids = {kClsId, kSepId, kSepId};
    inst.segment_ids = {0, 0, 1};
    Rng rng(80);
    apply_masking(inst, mc, vocab, rng);
    CHECK(inst.masking_skipped);
    CHECK(inst.masked_positions.empty());
  }
  SUBCASE("double masking is rejected") {
    Rng rng(81);
    TrainingInstance inst = fresh_instance(10);
    apply_masking(inst, mc, vocab, rng);
    CHECK_THROWS_AS(apply_masking(inst, mc, vocab, rng), UsageError);
  }
  SUBCASE("deterministic under the seed") {
    Rng r1(82), r2(82);
    TrainingInstance a = fresh_instance(20), b = fresh_instance(20);
    apply_masking(a, mc, vocab, r1);
    apply_masking(b, mc, vocab, r2);
    CHECK(a.token_ids == b.token_ids);
    CHECK(a.masked_positions == b.masked_positions);
    CHECK(a.masked_targets == b.masked_targets);
  }
  SUBCASE("config validation") {
    MaskingConfig bad = mc;
    bad.budget = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = mc;
    bad.mask_prob = 0.95;
    bad.random_prob = 0.1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = mc;
    bad.max_span = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    CHECK_THROWS_AS(masking_config_from_json({{"budgets", 0.2}}), ConfigError);
    MaskingConfig round = masking_config_from_json(masking_config_to_json(mc));
    CHECK(round.budget == mc.budget);
    CHECK(round.max_span == mc.max_span);
  }
}

TEST_CASE("sentence pair generation invariants") {
  std::vector<Document> docs = toy_documents(6, 5, 9);  // unique ids per segment
  const int vocab = max_word_id(docs) + 1;
  const int max_len = 32;

  auto expected_pair = [&](const PairDebug& dbg, Objective obj) {
    const auto& segs = docs[dbg.doc_index].segments;
    std::vector<int> x1 = segs[dbg.seg_index];
    std::vector<int> x2 = segs[dbg.seg_index + 1];
    if (dbg.swapped) std::swap(x1, x2);
    if (obj == Objective::mlm_nsp && dbg.negative) {
      x2 = docs[dbg.other_doc_index].segments[dbg.other_seg_index];
    }
    const std::size_t avail = static_cast<std::size_t>(dbg.target_len - 3);
    while (x1.size() + x2.size() > avail) {
      if (x1.size() > x2.size()) {
        x1.pop_back();
      } else {
        x2.pop_back();
      }
    }
    std::vector<int> tokens;
    tokens.push_back(kClsId);
    tokens.insert(tokens.end(), x1.begin(), x1.end());
    tokens.push_back(kSepId);
    tokens.insert(tokens.end(), x2.begin(), x2.end());
    tokens.push_back(kSepId);
    return tokens;
  };

  SUBCASE("sop negatives are exact swaps and positives consecutive") {
    InstanceGenerator gen(docs, Objective::mlm_sop, max_len, 0.1);
    Rng rng(90);
    int positives = 0, shorts = 0;
    const int trials = 10000;
    for (int i = 0; i < trials; ++i) {
      PairDebug dbg;
      TrainingInstance inst = gen.next(rng, &dbg);
      validate_instance(inst, vocab, max_len);
      CHECK(inst.token_ids == expected_pair(dbg, Objective::mlm_sop));
      CHECK(inst.sp_label == (dbg.negative ? 0 : 1));
      CHECK(dbg.swapped == dbg.negative);
      positives += inst.sp_label;
      if (dbg.target_len < max_len) {
        ++shorts;
        CHECK(dbg.target_len >= 16);
        CHECK(static_cast<int>(inst.token_ids.size()) <= dbg.target_len);
      }
      // structure: [CLS] ... [SEP] ... [SEP], segment ids 0* then 1*
      CHECK(inst.token_ids.front() == kClsId);
      CHECK(inst.token_ids.back() == kSepId);
      CHECK(std::count(inst.token_ids.begin(), inst.token_ids.end(), kSepId) == 2);
      const auto first_one = std::find(inst.segment_ids.begin(), inst.segment_ids.end(), 1);
      const std::size_t boundary = static_cast<std::size_t>(first_one - inst.segment_ids.begin());
      CHECK(inst.token_ids[boundary - 1] == kSepId);
      CHECK(std::all_of(first_one, inst.segment_ids.end(), [](int s) { return s == 1; }));
    }
    CHECK(std::abs(positives / double(trials) - 0.5) < 0.02);
    CHECK(shorts / double(trials) == doctest::Approx(0.1).epsilon(0.25));
  }
  SUBCASE("nsp negatives come from a different document") {
    InstanceGenerator gen(docs, Objective::mlm_nsp, max_len, 0.0);
    Rng rng(91);
    int negatives = 0;
    for (int i = 0; i < 4000; ++i) {
      PairDebug dbg;
      TrainingInstance inst = gen.next(rng, &dbg);
      CHECK(inst.token_ids == expected_pair(dbg, Objective::mlm_nsp));
      CHECK_FALSE(dbg.swapped);
      if (dbg.negative) {
        ++negatives;
        CHECK(dbg.other_doc_index != dbg.doc_index);
        CHECK(dbg.other_doc_index >= 0);
      } else {
        CHECK(dbg.other_doc_index == -1);
      }
    }
    CHECK(negatives > 1000);
  }
  SUBCASE("mlm_only draws single segments") {
    InstanceGenerator gen(docs, Objective::mlm_only, max_len, 0.0);
    Rng rng(92);
    for (int i = 0; i < 200; ++i) {
      PairDebug dbg;
      TrainingInstance inst = gen.next(rng, &dbg);
      CHECK(inst.sp_label == kNoLabel);
      CHECK(std::count(inst.token_ids.begin(), inst.token_ids.end(), kSepId) == 1);
      CHECK(std::all_of(inst.segment_ids.begin(), inst.segment_ids.end(),
                        [](int s) { return s == 0; }));
      const auto& seg = docs[dbg.doc_index].segments[dbg.seg_index];
      std::vector<int> body(inst.token_ids.begin() + 1, inst.token_ids.end() - 1);
      CHECK(std::equal(body.begin(), body.end(), seg.begin()));
    }
  }
  SUBCASE("generation is deterministic in the seed") {
    InstanceGenerator gen(docs, Objective::mlm_sop, max_len, 0.1);
    Rng r1(93), r2(93);
    for (int i = 0; i < 50; ++i) {
      TrainingInstance a = gen.next(r1);
      TrainingInstance b = gen.next(r2);
      CHECK(a.token_ids == b.token_ids);
      CHECK(a.sp_label == b.sp_label);
    }
  }
  SUBCASE("long segments truncate the longer tail first") {
    std::vector<Document> wide(1);
    wide[0].segments = {std::vector<int>(40, 5), std::vector<int>(10, 6)};
    InstanceGenerator gen(wide, Objective::mlm_sop, 24, 0.0);
    Rng rng(94);
    for (int i = 0; i < 40; ++i) {
      TrainingInstance inst = gen.next(rng);
      CHECK(inst.token_ids.size() <= 24);
      // both segments survive truncation
      const auto first_sep = std::find(inst.token_ids.begin(), inst.token_ids.end(), kSepId);
      CHECK(first_sep - inst.token_ids.begin() > 1);
      CHECK(inst.token_ids.end() - first_sep > 2);
    }
  }
  SUBCASE("insufficient corpora are rejected") {
    std::vector<Document> single(1);
    single[0].segments = {std::vector<int>{5, 6}};
    CHECK_THROWS_AS(InstanceGenerator(single, Objective::mlm_sop, 32, 0.0), DataError);

    std::vector<Document> one_doc_pairs(1);
    one_doc_pairs[0].segments = {std::vector<int>{5}, std::vector<int>{6}};
    CHECK_NOTHROW(InstanceGenerator(one_doc_pairs, Objective::mlm_sop, 32, 0.0));
    CHECK_THROWS_AS(InstanceGenerator(one_doc_pairs, Objective::mlm_nsp, 32, 0.0), DataError);
    CHECK_THROWS_AS(InstanceGenerator({}, Objective::mlm_only, 32, 0.0), DataError);
    CHECK_THROWS_AS(InstanceGenerator(docs, Objective::mlm_sop, 12, 0.1), ConfigError);
  }
}

TEST_CASE("batch packing pads and scatters targets") {
  TrainingInstance a;
  a.token_ids = {kClsId, 7, 8, kSepId, 9, kSepId};
  a.segment_ids = {0, 0, 0, 0, 1, 1};
  a.masked_positions = {1, 4};
  a.masked_targets = {30, 31};
  a.sp_label = 1;
  TrainingInstance b;
  b.token_ids = {kClsId, 10, kSepId};
  b.segment_ids = {0, 0, 0};

  Batch batch = pack_batch({a, b}, 8);
  CHECK(batch.batch == 2);
  CHECK(batch.seq_len == 6);
  CHECK(batch.token_ids == std::vector<int>{kClsId, 7, 8, kSepId, 9, kSepId,  //
                                            kClsId, 10, kSepId, kPadId, kPadId, kPadId});
  CHECK(batch.segment_ids == std::vector<int>{0, 0, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0});
  CHECK(batch.attention_mask ==
        std::vector<std::uint8_t>{1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0});
  CHECK(batch.mlm_targets == std::vector<int>{kIgnoreIndex, 30, kIgnoreIndex, kIgnoreIndex, 31,
                                              kIgnoreIndex, kIgnoreIndex, kIgnoreIndex,
                                              kIgnoreIndex, kIgnoreIndex, kIgnoreIndex,
                                              kIgnoreIndex});
  CHECK(batch.sp_labels == std::vector<int>{1, kIgnoreIndex});

  ModelInput in = batch.input();
  CHECK(in.batch == 2);
  CHECK(in.seq_len == 6);
  CHECK(in.token_ids.size() == 12);

  CHECK_THROWS_AS(pack_batch({}, 8), UsageError);
  CHECK_THROWS_AS(pack_batch({a}, 5), DataError);
  TrainingInstance broken = a;
  broken.masked_positions = {99};
  broken.masked_targets = {30};
  CHECK_THROWS_AS(pack_batch({broken}, 8), DataError);
}

TEST_CASE("jsonl round trip") {
  TempDir tmp("jsonl");
  TrainingInstance a;
  a.token_ids = {kClsId, 7, 8, kSepId, 9, kSepId};
  a.segment_ids = {0, 0, 0, 0, 1, 1};
  a.masked_positions = {2};
  a.masked_targets = {12};
  a.sp_label = 0;
  TrainingInstance b;
  b.token_ids = {kClsId, 10, kSepId};
  b.segment_ids = {0, 0, 0};

  const std::string path = tmp.file("instances.jsonl");
  write_instances_jsonl(path, {a, b});
  std::vector<TrainingInstance> back = read_instances_jsonl(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].token_ids == a.token_ids);
  CHECK(back[0].masked_targets == a.masked_targets);
  CHECK(back[0].sp_label == 0);
  CHECK(back[1].sp_label == kNoLabel);

  nlohmann::json j = instance_to_json(b);
  CHECK(j.size() == 5);
  CHECK(j.at("sp_label").is_null());

  SUBCASE("parse errors carry the line number") {
    testsupport::write_file(path, instance_to_json(a).dump() + "\nnot json\n");
    CHECK_THROWS_WITH_AS(read_instances_jsonl(path), doctest::Contains(":2"), DataError);
  }
  SUBCASE("missing fields are rejected") {
    CHECK_THROWS_AS(instance_from_json({{"token_ids", {1, 2}}}), DataError);
    CHECK_THROWS_AS(instance_from_json(nlohmann::json::array()), DataError);
  }
}

TEST_CASE("instance validation catches structural defects") {
  TrainingInstance good;
  good.token_ids = {kClsId, 7, 8, kSepId};
  good.segment_ids = {0, 0, 0, 0};
  good.masked_positions = {1, 2};
  good.masked_targets = {9, 10};
  good.sp_label = kNoLabel;
  CHECK_NOTHROW(validate_instance(good, 64, 16));

  auto expect_bad = [](TrainingInstance inst, int vocab = 64, int max_len = 16) {
    CHECK_THROWS_AS(validate_instance(inst, vocab, max_len), DataError);
  };
  expect_bad([&] { TrainingInstance t = good; t.token_ids.clear(); t.segment_ids.clear(); t.masked_positions.clear(); t.masked_targets.clear(); return t; }());
  expect_bad([&] { TrainingInstance t = good; t.segment_ids.pop_back(); return t; }());
  expect_bad([&] { TrainingInstance t = good; t.token_ids[1] = 64; return t; }());
  expect_bad([&] { TrainingInstance t = good; t.segment_ids[1] = 2; return t; }());
  expect_bad([&] { TrainingInstance t = good; t.masked_positions = {2, 1}; t.masked_targets = {9, 10}; return t; }());
  expect_bad([&] { TrainingInstance t = good; t.masked_positions = {1, 1}; return t; }());
  expect_bad([&] { TrainingInstance t = good; t.masked_targets = {9}; return t; }());
  expect_bad([&] { TrainingInstance t = good; t.masked_targets = {9, 99}; return t; }());
  expect_bad([&] { TrainingInstance t = good; t.sp_label = 3; return t; }());
  expect_bad(good, 64, 3);  // too long for max_len
}
