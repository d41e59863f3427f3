#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstring>
#include <filesystem>

#include "knnmoe/checkpoint.hpp"
#include "knnmoe/rng.hpp"

using namespace knnmoe;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.vocab_size = 12;
  c.dim = 8;
  c.num_layers = 2;
  c.num_heads = 2;
  c.max_seq_len = 8;
  c.num_experts = 4;
  c.active_experts = 2;
  c.expert_hidden = 8;
  c.moe_layers = {1};
  return c;
}

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("checkpoints survive a save/load cycle byte for byte") {
  Model m = init_model(small_config(), 42);
  std::string path = temp_path("knnmoe_ckpt_test.bin");
  save_checkpoint(m, path);
  Model back = load_checkpoint(path);
  std::remove(path.c_str());

  CHECK(back.cfg.vocab_size == m.cfg.vocab_size);
  CHECK(back.cfg.moe_layers == std::vector<int>{1});
  REQUIRE(back.params.size() == m.params.size());

  // weights were rounded to f32 on the way out, so a second cycle is exact
  std::vector<uint8_t> once = serialize_checkpoint(m);
  std::vector<uint8_t> twice = serialize_checkpoint(back);
  CHECK(once == twice);
  CHECK(model_fingerprint(m) == model_fingerprint(back));
  CHECK(model_fingerprint(m).size() == 16);

  Model other = init_model(small_config(), 43);
  CHECK(model_fingerprint(other) != model_fingerprint(m));
}

TEST_CASE("checkpoint headers resolve moe_layers explicitly") {
  ModelConfig c = small_config();
  c.moe_layers.clear();  // implicit every-layer selection
  Model m = init_model(c, 1);
  std::vector<uint8_t> bytes = serialize_checkpoint(m);
  Model back = parse_checkpoint(bytes, "test");
  CHECK(back.cfg.moe_layers == std::vector<int>{0, 1});
}

TEST_CASE("checkpoint parsing rejects corrupted files") {
  Model m = init_model(small_config(), 7);
  std::vector<uint8_t> good = serialize_checkpoint(m);

  std::vector<uint8_t> bad = good;
  bad[0] = 'X';
  CHECK_THROWS_WITH_AS(parse_checkpoint(bad, "test"), doctest::Contains("bad magic"), Error);

  std::vector<uint8_t> cut(good.begin(), good.end() - 5);
  CHECK_THROWS_WITH_AS(parse_checkpoint(cut, "test"), doctest::Contains("truncated"), Error);

  std::vector<uint8_t> extra = good;
  extra.push_back(0);
  CHECK_THROWS_WITH_AS(parse_checkpoint(extra, "test"), doctest::Contains("trailing bytes"),
                       Error);

  std::vector<uint8_t> tiny(good.begin(), good.begin() + 4);
  CHECK_THROWS_AS(parse_checkpoint(tiny, "test"), Error);

  CHECK_THROWS_WITH_AS(load_checkpoint(temp_path("knnmoe_no_such_ckpt.bin")),
                       doctest::Contains("cannot open"), Error);
}

TEST_CASE("checkpoint header keys are strict") {
  // splice an unknown key into the JSON header and re-length-prefix it
  Model m = init_model(small_config(), 7);
  std::vector<uint8_t> good = serialize_checkpoint(m);
  uint32_t hlen;
  std::memcpy(&hlen, good.data() + 8, 4);
  std::string header(reinterpret_cast<const char*>(good.data() + 12), hlen);
  ojson hdr = parse_json(header, "test");
  hdr["config"]["extra_knob"] = 1;
  std::string patched = hdr.dump();

  std::vector<uint8_t> bad;
  bad.insert(bad.end(), good.begin(), good.begin() + 8);
  uint32_t plen = uint32_t(patched.size());
  bad.resize(12);
  std::memcpy(bad.data() + 8, &plen, 4);
  bad.insert(bad.end(), patched.begin(), patched.end());
  bad.insert(bad.end(), good.begin() + 12 + hlen, good.end());

  CHECK_THROWS_WITH_AS(parse_checkpoint(bad, "test"),
                       doctest::Contains("unknown key \"extra_knob\""), Error);
}
