#include "knnmoe/config.hpp"

#include <cmath>

#include "knnmoe/checkpoint.hpp"

namespace knnmoe {

namespace {

constexpr uint64_t kSeedModel = 0x6d6f64656c;  // "model"
constexpr uint64_t kSeedTrainer = 0x736764;    // "sgd"
constexpr uint64_t kSeedData = 0x64617461;     // "data"

}  // namespace

uint64_t SeedPlan::model_init() const { return mix_seed(master, kSeedModel); }
uint64_t SeedPlan::trainer() const { return mix_seed(master, kSeedTrainer); }
uint64_t SeedPlan::data_train() const { return mix_seed(mix_seed(master, kSeedData), 0); }
uint64_t SeedPlan::data_ref() const { return mix_seed(mix_seed(master, kSeedData), 1); }
uint64_t SeedPlan::data_test() const { return mix_seed(mix_seed(master, kSeedData), 2); }

namespace {

void validate_corpus_config(const CorpusConfig& c, const ModelConfig& m,
                            const std::string& what) {
  if (c.kind != "markov2" && c.kind != "patterns")
    fail(what + ": unknown domain kind \"" + c.kind + "\" (expected markov2 or patterns)");
  if (c.domain_id < 0) fail(what + ": domain_id must be non-negative");
  if (c.sequences < 1) fail(what + ": sequences must be at least 1");
  if (c.seq_len < 2) fail(what + ": seq_len must be at least 2");
  if (c.seq_len > m.max_seq_len)
    fail(what + ": seq_len " + std::to_string(c.seq_len) + " exceeds model max_seq_len " +
         std::to_string(m.max_seq_len));
}

CorpusConfig corpus_config_from_json(const ojson& j, CorpusConfig dflt,
                                     const std::string& what) {
  check_keys(j, {"domain_id", "kind", "sequences", "seq_len"}, what);
  dflt.domain_id = get_int_or(j, "domain_id", dflt.domain_id, what);
  dflt.kind = get_string_or(j, "kind", dflt.kind, what);
  dflt.sequences = get_int_or(j, "sequences", dflt.sequences, what);
  dflt.seq_len = get_int_or(j, "seq_len", dflt.seq_len, what);
  return dflt;
}

ojson corpus_config_json(const CorpusConfig& c) {
  ojson j;
  j["domain_id"] = c.domain_id;
  j["kind"] = c.kind;
  j["sequences"] = c.sequences;
  j["seq_len"] = c.seq_len;
  return j;
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  validate_corpus_config(train_data, model, "config.data.train");
  validate_corpus_config(ref_data, model, "config.data.ref");
  validate_corpus_config(test_data, model, "config.data.test");

  if (train.steps < 1) fail("config.train: steps must be at least 1");
  if (train.batch_size < 1) fail("config.train: batch_size must be at least 1");
  if (!(train.lr > 0.0)) fail("config.train: lr must be positive");
  if (!(train.momentum >= 0.0 && train.momentum < 1.0))
    fail("config.train: momentum must lie in [0,1)");
  if (!(train.lr_min_frac >= 0.0 && train.lr_min_frac <= 1.0))
    fail("config.train: lr_min_frac must lie in [0,1]");
  if (train.log_every < 1) fail("config.train: log_every must be at least 1");

  if (!(build.eta > 0.0)) fail("config.build: eta must be positive");
  if (build.steps < 0) fail("config.build: steps must be non-negative");

  if (retrieval.neighbors < 1) fail("config.retrieval: neighbors must be at least 1");
  if (!(retrieval.min_confidence >= 0.0))
    fail("config.retrieval: min_confidence must be non-negative");

  if (selective_threshold && !(*selective_threshold > 0.0))
    fail("config.eval: selective_threshold must be positive");

  if (sweep.refine_steps.empty() || sweep.ref_fractions.empty() || sweep.neighbors.empty() ||
      sweep.kernels.empty())
    fail("config.sweep: every axis needs at least one value");
  for (int s : sweep.refine_steps)
    if (s < 0) fail("config.sweep: refine_steps must be non-negative");
  for (double f : sweep.ref_fractions)
    if (!(f > 0.0 && f <= 1.0)) fail("config.sweep: ref_fractions must lie in (0,1]");
  for (int k : sweep.neighbors)
    if (k < 1) fail("config.sweep: neighbors must be at least 1");
  for (const std::string& k : sweep.kernels) kernel_from_name(k, "config.sweep.kernels");

  if (output_dir.empty()) fail("config.output: dir must not be empty");
}

RunConfig default_config() { return RunConfig{}; }

RunConfig config_from_json(const ojson& j, const std::string& what) {
  check_keys(j, {"model", "data", "train", "build", "retrieval", "eval", "sweep", "seeds",
                 "output"},
             what);
  RunConfig c;

  if (j.contains("model")) c.model = model_config_from_json(j["model"], what + ".model");

  if (j.contains("data")) {
    const ojson& d = j["data"];
    check_keys(d, {"train", "ref", "test"}, what + ".data");
    if (d.contains("train"))
      c.train_data = corpus_config_from_json(d["train"], c.train_data, what + ".data.train");
    if (d.contains("ref"))
      c.ref_data = corpus_config_from_json(d["ref"], c.ref_data, what + ".data.ref");
    if (d.contains("test"))
      c.test_data = corpus_config_from_json(d["test"], c.test_data, what + ".data.test");
  }

  if (j.contains("train")) {
    const ojson& t = j["train"];
    std::string w = what + ".train";
    check_keys(t, {"steps", "batch_size", "lr", "momentum", "lr_min_frac", "log_every"}, w);
    c.train.steps = get_int_or(t, "steps", c.train.steps, w);
    c.train.batch_size = get_int_or(t, "batch_size", c.train.batch_size, w);
    c.train.lr = get_double_or(t, "lr", c.train.lr, w);
    c.train.momentum = get_double_or(t, "momentum", c.train.momentum, w);
    c.train.lr_min_frac = get_double_or(t, "lr_min_frac", c.train.lr_min_frac, w);
    c.train.log_every = get_int_or(t, "log_every", c.train.log_every, w);
  }

  if (j.contains("build")) {
    const ojson& b = j["build"];
    std::string w = what + ".build";
    check_keys(b, {"eta", "steps", "mode", "kernel", "accept_only_improving", "measure_tokens"},
               w);
    c.build.eta = get_double_or(b, "eta", c.build.eta, w);
    c.build.steps = get_int_or(b, "steps", c.build.steps, w);
    if (b.contains("mode")) c.build.mode = build_mode_from_name(get_string(b, "mode", w), w);
    if (b.contains("kernel")) c.build.kernel = kernel_from_name(get_string(b, "kernel", w), w);
    c.build.accept_only_improving =
        get_bool_or(b, "accept_only_improving", c.build.accept_only_improving, w);
    c.build.measure_tokens = get_bool_or(b, "measure_tokens", c.build.measure_tokens, w);
  }

  if (j.contains("retrieval")) {
    const ojson& r = j["retrieval"];
    std::string w = what + ".retrieval";
    check_keys(r, {"neighbors", "kernel", "min_confidence"}, w);
    c.retrieval.neighbors = get_int_or(r, "neighbors", c.retrieval.neighbors, w);
    if (r.contains("kernel"))
      c.retrieval.kernel = kernel_from_name(get_string(r, "kernel", w), w);
    c.retrieval.min_confidence =
        get_double_or(r, "min_confidence", c.retrieval.min_confidence, w);
  }

  if (j.contains("eval")) {
    const ojson& e = j["eval"];
    std::string w = what + ".eval";
    check_keys(e, {"mode", "selective_threshold"}, w);
    if (e.contains("mode")) c.eval_mode = eval_mode_from_name(get_string(e, "mode", w), w);
    if (e.contains("selective_threshold"))
      c.selective_threshold = get_double(e, "selective_threshold", w);
  }

  if (j.contains("sweep")) {
    const ojson& s = j["sweep"];
    std::string w = what + ".sweep";
    check_keys(s, {"refine_steps", "ref_fractions", "neighbors", "kernels"}, w);
    if (s.contains("refine_steps")) c.sweep.refine_steps = get_int_array(s, "refine_steps", w);
    if (s.contains("ref_fractions"))
      c.sweep.ref_fractions = get_double_array(s, "ref_fractions", w);
    if (s.contains("neighbors")) c.sweep.neighbors = get_int_array(s, "neighbors", w);
    if (s.contains("kernels")) c.sweep.kernels = get_string_array(s, "kernels", w);
  }

  if (j.contains("seeds")) {
    const ojson& s = j["seeds"];
    std::string w = what + ".seeds";
    check_keys(s, {"master"}, w);
    if (s.contains("master")) c.seeds.master = get_u64(s, "master", w);
  }

  if (j.contains("output")) {
    const ojson& o = j["output"];
    std::string w = what + ".output";
    check_keys(o, {"dir"}, w);
    c.output_dir = get_string_or(o, "dir", c.output_dir, w);
  }

  c.validate();
  return c;
}

ojson config_json(const RunConfig& c) {
  ojson j;
  // Unlike a checkpoint header, the config keeps moe_layers unresolved so an
  // empty list still tracks num_layers through later overrides.
  ojson mj = model_config_json(c.model);
  mj["moe_layers"] = c.model.moe_layers;
  j["model"] = std::move(mj);

  ojson d;
  d["train"] = corpus_config_json(c.train_data);
  d["ref"] = corpus_config_json(c.ref_data);
  d["test"] = corpus_config_json(c.test_data);
  j["data"] = std::move(d);

  ojson t;
  t["steps"] = c.train.steps;
  t["batch_size"] = c.train.batch_size;
  t["lr"] = c.train.lr;
  t["momentum"] = c.train.momentum;
  t["lr_min_frac"] = c.train.lr_min_frac;
  t["log_every"] = c.train.log_every;
  j["train"] = std::move(t);

  ojson b;
  b["eta"] = c.build.eta;
  b["steps"] = c.build.steps;
  b["mode"] = build_mode_name(c.build.mode);
  b["kernel"] = kernel_name(c.build.kernel);
  b["accept_only_improving"] = c.build.accept_only_improving;
  b["measure_tokens"] = c.build.measure_tokens;
  j["build"] = std::move(b);

  ojson r;
  r["neighbors"] = c.retrieval.neighbors;
  r["kernel"] = kernel_name(c.retrieval.kernel);
  r["min_confidence"] = c.retrieval.min_confidence;
  j["retrieval"] = std::move(r);

  ojson e;
  e["mode"] = eval_mode_name(c.eval_mode);
  if (c.selective_threshold) e["selective_threshold"] = *c.selective_threshold;
  j["eval"] = std::move(e);

  ojson s;
  s["refine_steps"] = c.sweep.refine_steps;
  s["ref_fractions"] = c.sweep.ref_fractions;
  s["neighbors"] = c.sweep.neighbors;
  s["kernels"] = c.sweep.kernels;
  j["sweep"] = std::move(s);

  ojson sd;
  sd["master"] = c.seeds.master;
  j["seeds"] = std::move(sd);

  ojson o;
  o["dir"] = c.output_dir;
  j["output"] = std::move(o);
  return j;
}

RunConfig load_config(const std::string& path) {
  std::string text = read_file_text(path, "config " + path);
  return config_from_json(parse_json(text, "config " + path), "config " + path);
}

void apply_override(ojson& j, const std::string& assignment, const std::string& what) {
  size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    fail(what + ": expected path=value, got \"" + assignment + "\"");
  std::string path = assignment.substr(0, eq);
  std::string value = assignment.substr(eq + 1);

  ojson parsed = ojson::parse(value, nullptr, false);
  if (parsed.is_discarded()) parsed = value;  // bare words become strings

  ojson* cur = &j;
  size_t start = 0;
  while (true) {
    size_t dot = path.find('.', start);
    std::string seg =
        dot == std::string::npos ? path.substr(start) : path.substr(start, dot - start);
    if (seg.empty()) fail(what + ": empty segment in path \"" + path + "\"");
    if (!cur->is_object()) fail(what + ": path \"" + path + "\" descends into a non-object");
    if (dot == std::string::npos) {
      (*cur)[seg] = std::move(parsed);
      return;
    }
    cur = &(*cur)[seg];
    if (cur->is_null()) *cur = ojson::object();
    start = dot + 1;
  }
}

}  // namespace knnmoe
