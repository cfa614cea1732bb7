#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdint>
#include <fstream>

#include "albertlab/checkpoint.hpp"
#include "support.hpp"

using namespace albert;
using testsupport::TempDir;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.num_layers = 2;
  c.hidden_size = 16;
  c.num_heads = 2;
  c.embedding_size = 8;
  c.vocab_size = 37;
  c.ffn_size = 64;
  c.max_positions = 16;
  c.dropout_p = 0.0;
  return c;
}

bool same_values(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

}  // namespace

TEST_CASE("checkpoint round trip is exact") {
  TempDir tmp("ckpt");
  ModelConfig cfg = tiny_config();
  ParameterStore ps = build_model(cfg, 9);
  const std::string path = tmp.file("model.albt");
  save_checkpoint(path, cfg, ps, {}, {{"step", 12}});

  Checkpoint back = load_checkpoint(path);
  CHECK(back.config.num_layers == 2);
  CHECK(back.config.num_heads == 2);  // normalized config round trips
  CHECK(back.params.paths() == ps.paths());
  for (const std::string& p : ps.paths()) {
    CHECK(same_values(back.params.at(p), ps.at(p)));
  }
  CHECK(back.sidecar.at("step") == 12);
  CHECK(back.sidecar.at("format_version") == 1);
  CHECK(back.extra_tensors.empty());

  SUBCASE("save-load-save produces identical bytes") {
    const std::string again = tmp.file("model2.albt");
    save_checkpoint(again, back.config, back.params);
    CHECK(testsupport::read_file(path).substr(0, 4) == "ALBT");
    CHECK(testsupport::read_file(again) == testsupport::read_file(path));
  }
}

TEST_CASE("optimizer state rides along under optim paths") {
  TempDir tmp("ckpt");
  ModelConfig cfg = tiny_config();
  ParameterStore ps = build_model(cfg, 9);
  std::vector<std::pair<std::string, Tensor>> extra;
  extra.emplace_back("optim.m.pooler.weight", Tensor::full({16, 16}, 0.25));
  extra.emplace_back("optim.t", Tensor::scalar(7.0));
  const std::string path = tmp.file("model.albt");
  save_checkpoint(path, cfg, ps, extra);

  Checkpoint back = load_checkpoint(path);
  REQUIRE(back.extra_tensors.size() == 2);
  CHECK(back.extra_tensors[0].first == "optim.m.pooler.weight");
  CHECK(back.extra_tensors[0].second.data()[5] == 0.25);
  CHECK(back.extra_tensors[1].second.item() == 7.0);
}

TEST_CASE("f32 tensors load widened") {
  TempDir tmp("ckpt");
  // hand-build a file for a model with one overridden f32 tensor: write the
  // normal checkpoint, then rewrite pooler.bias as dtype 0
  ModelConfig cfg = tiny_config();
  ParameterStore ps = build_model(cfg, 9);
  for (int i = 0; i < 16; ++i) ps.at("pooler.bias").data()[i] = 0.5 + i;
  const std::string path = tmp.file("model.albt");
  save_checkpoint(path, cfg, ps);

  std::string bytes = testsupport::read_file(path);
  const std::string needle = "pooler.bias";
  const auto at = bytes.find(needle);
  REQUIRE(at != std::string::npos);
  std::size_t cursor = at + needle.size();
  cursor += 4 /*rank*/ + 8 /*dim*/;
  REQUIRE(bytes[cursor] == 1);
  bytes[cursor] = 0;  // dtype f32
  std::string f32(16 * 4, '\0');
  for (int i = 0; i < 16; ++i) {
    float v = 0.5f + static_cast<float>(i);
    std::memcpy(f32.data() + i * 4, &v, 4);
  }
  bytes = bytes.substr(0, cursor + 1) + f32 + bytes.substr(cursor + 1 + 16 * 8);
  std::ofstream(path, std::ios::binary | std::ios::trunc) << bytes;

  Checkpoint back = load_checkpoint(path);
  for (int i = 0; i < 16; ++i) CHECK(back.params.at("pooler.bias").data()[i] == 0.5 + i);
}

TEST_CASE("corrupt and mismatched files are rejected") {
  TempDir tmp("ckpt");
  ModelConfig cfg = tiny_config();
  ParameterStore ps = build_model(cfg, 9);
  const std::string path = tmp.file("model.albt");
  save_checkpoint(path, cfg, ps);

  SUBCASE("bad magic") {
    std::string bytes = testsupport::read_file(path);
    bytes[0] = 'X';
    std::ofstream(path, std::ios::binary | std::ios::trunc) << bytes;
    CHECK_THROWS_WITH_AS(load_checkpoint(path),
                         doctest::Contains("not an ALBT checkpoint"), IoError);
  }
  SUBCASE("truncated file") {
    std::string bytes = testsupport::read_file(path);
    bytes.resize(bytes.size() / 2);
    std::ofstream(path, std::ios::binary | std::ios::trunc) << bytes;
    CHECK_THROWS_AS(load_checkpoint(path), IoError);
  }
  SUBCASE("missing sidecar") {
    std::filesystem::remove(sidecar_path(path));
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("sidecar"), IoError);
  }
  SUBCASE("sidecar that is not json") {
    std::ofstream(sidecar_path(path), std::ios::trunc) << "not json";
    CHECK_THROWS_AS(load_checkpoint(path), IoError);
  }
  SUBCASE("config mismatch surfaces the first differing tensor") {
    ModelConfig other = cfg;
    other.vocab_size = 50;
    nlohmann::json side;
    {
      std::ifstream in(sidecar_path(path));
      in >> side;
    }
    side["model"] = model_config_to_json(other.normalized());
    std::ofstream(sidecar_path(path), std::ios::trunc) << side.dump(2);
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("embeddings.token"), IoError);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(load_checkpoint(tmp.file("nope.albt")), IoError); }
}
