#include "knnmoe/cli.hpp"

#include <CLI11.hpp>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "knnmoe/checkpoint.hpp"
#include "knnmoe/config.hpp"
#include "knnmoe/eval.hpp"
#include "knnmoe/membuild.hpp"
#include "knnmoe/memstore.hpp"
#include "knnmoe/rng.hpp"
#include "knnmoe/trainer.hpp"

namespace knnmoe {

namespace {

namespace fs = std::filesystem;

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_path, "JSON config file (defaults apply when omitted)");
  cmd->add_option("--set", o.sets, "dotted config override, e.g. --set train.steps=500")
      ->type_name("PATH=VALUE");
  cmd->add_option("--seed", o.seed, "master seed; shorthand for --set seeds.master=N");
}

RunConfig resolve_config(const CommonOpts& o) {
  ojson j;
  std::string what = "config";
  if (o.config_path.empty()) {
    j = config_json(default_config());
  } else {
    what = "config " + o.config_path;
    j = parse_json(read_file_text(o.config_path, what), what);
  }
  if (o.seed) apply_override(j, "seeds.master=" + std::to_string(*o.seed), "--seed");
  for (const std::string& s : o.sets) apply_override(j, s, "--set");
  RunConfig c = config_from_json(j, what);
  c.validate();
  return c;
}

void ensure_parent_dir(const std::string& path) {
  fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

void write_json_file(const ojson& j, const std::string& path) {
  ensure_parent_dir(path);
  write_file_text(path, j.dump(2) + "\n");
}

// Mode tag usable in file names.
std::string mode_tag(EvalMode m) {
  switch (m) {
    case EvalMode::ZeroShot:
      return "zeroshot";
    case EvalMode::KnnMoe:
      return "knn";
    case EvalMode::KnnMoeSelective:
      return "knn_selective";
  }
  fail("eval: unknown mode value");
}

int cmd_show_config(const CommonOpts& o) {
  RunConfig c = resolve_config(o);
  std::cout << config_json(c).dump(2) << "\n";
  return 0;
}

int cmd_gen_data(const CommonOpts& o) {
  RunConfig c = resolve_config(o);
  fs::create_directories(c.output_dir);
  auto gen = [&](const CorpusConfig& cc, uint64_t seed, const char* name) {
    Corpus corpus =
        generate_corpus(cc.domain(c.model.vocab_size), cc.sequences, cc.seq_len, seed);
    std::string path = c.output_dir + "/" + name;
    save_corpus(corpus, path);
    std::printf("wrote %s: %d sequences, %d tokens, domain %d (%s)\n", path.c_str(),
                int(corpus.sequences.size()), corpus.total_tokens(), cc.domain_id,
                cc.kind.c_str());
  };
  gen(c.train_data, c.seeds.data_train(), "train.txt");
  gen(c.ref_data, c.seeds.data_ref(), "ref.txt");
  gen(c.test_data, c.seeds.data_test(), "test.txt");
  return 0;
}

int cmd_train(const CommonOpts& o, const std::string& data_path, const std::string& ckpt_path) {
  RunConfig c = resolve_config(o);
  std::string data = data_path.empty() ? c.output_dir + "/train.txt" : data_path;
  std::string ckpt = ckpt_path.empty() ? c.output_dir + "/model.ckpt" : ckpt_path;

  Corpus corpus = load_corpus(data);
  Model m = init_model(c.model, c.seeds.model_init());
  TrainParams tp = c.train;
  tp.seed = c.seeds.trainer();
  TrainStats st = train_model(m, corpus, tp);
  for (const auto& [step, loss] : st.loss_log) std::printf("step %6d  loss %.6f\n", step, loss);
  std::printf("trained %d steps: loss %.6f -> %.6f\n", st.steps, st.first_loss, st.final_loss);

  ensure_parent_dir(ckpt);
  save_checkpoint(m, ckpt);
  std::printf("wrote %s (fingerprint %s)\n", ckpt.c_str(), model_fingerprint(m).c_str());
  return 0;
}

ojson build_report_json(const BuildReport& r, bool with_tokens) {
  ojson j;
  j["sequences"] = r.sequences;
  j["target_positions"] = r.target_positions;
  j["stored_positions"] = r.stored_positions;
  j["improved"] = r.improved;
  j["mean_isolated_delta"] = r.mean_isolated_delta;
  j["joint_nll_before"] = r.joint_nll_before;
  j["joint_nll_after"] = r.joint_nll_after;
  if (with_tokens) {
    ojson rows = ojson::array();
    for (const TokenMeasure& tm : r.tokens) {
      ojson e;
      e["sequence"] = tm.sequence;
      e["position"] = tm.position;
      e["nll_before"] = tm.nll_before;
      e["nll_after"] = tm.nll_after;
      e["stored"] = tm.stored;
      rows.push_back(std::move(e));
    }
    j["tokens"] = std::move(rows);
  }
  return j;
}

int cmd_build_memory(const CommonOpts& o, const std::string& ckpt_path,
                     const std::string& ref_path, const std::string& mem_path) {
  RunConfig c = resolve_config(o);
  std::string ckpt = ckpt_path.empty() ? c.output_dir + "/model.ckpt" : ckpt_path;
  std::string ref = ref_path.empty() ? c.output_dir + "/ref.txt" : ref_path;
  std::string mem_out = mem_path.empty() ? c.output_dir + "/memory.knn" : mem_path;

  Model m = load_checkpoint(ckpt);
  Corpus corpus = load_corpus(ref);
  BuildReport rep;
  MemoryFile mem = build_memory(m, corpus, c.build, &rep);
  ensure_parent_dir(mem_out);
  save_memory(mem, mem_out);

  std::printf("wrote %s: %d entries across %d layers (%s, eta %g, %d steps)\n", mem_out.c_str(),
              mem.total_entries(), int(mem.layers.size()), mem.build.mode.c_str(), mem.build.eta,
              mem.build.steps);
  bool measured = c.build.measure_tokens || c.build.accept_only_improving;
  std::printf("stored %d/%d target positions\n", rep.stored_positions, rep.target_positions);
  if (measured)
    std::printf("isolated replay: %d/%d tokens improved, mean nll delta %+.6f\n", rep.improved,
                int(rep.tokens.size()), rep.mean_isolated_delta);
  std::printf("joint nll: %.6f -> %.6f\n", rep.joint_nll_before, rep.joint_nll_after);

  write_json_file(build_report_json(rep, measured), c.output_dir + "/build_report.json");
  return 0;
}

int cmd_eval(const CommonOpts& o, const std::string& ckpt_path, const std::string& mem_path,
             const std::string& test_path, const std::string& mode_arg) {
  RunConfig c = resolve_config(o);
  std::string ckpt = ckpt_path.empty() ? c.output_dir + "/model.ckpt" : ckpt_path;
  std::string test = test_path.empty() ? c.output_dir + "/test.txt" : test_path;

  EvalParams p;
  p.mode = mode_arg.empty() ? c.eval_mode : eval_mode_from_name(mode_arg, "--mode");
  p.router = c.retrieval;
  p.selective_threshold = c.selective_threshold;

  Model m = load_checkpoint(ckpt);
  Corpus corpus = load_corpus(test);

  MemoryFile mem;
  const MemoryFile* memp = nullptr;
  if (p.mode != EvalMode::ZeroShot) {
    std::string mp = mem_path.empty() ? c.output_dir + "/memory.knn" : mem_path;
    mem = load_memory(mp);
    memp = &mem;
  }

  EvalReport r = evaluate(m, memp, corpus, p);

  std::string tag = mode_tag(p.mode);
  write_json_file(report_json(r), c.output_dir + "/eval_" + tag + ".json");
  ensure_parent_dir(c.output_dir + "/eval_" + tag + ".csv");
  write_file_text(c.output_dir + "/eval_" + tag + ".csv", report_csv(r));
  write_json_file(timing_json(r), c.output_dir + "/eval_" + tag + "_timing.json");

  std::printf("mode %s over %d examples\n", eval_mode_name(p.mode).c_str(), int(r.rows.size()));
  std::printf("baseline: nll %.6f  ppl %.4f  acc %.4f\n", r.agg_baseline.mean_nll,
              r.agg_baseline.ppl, r.agg_baseline.accuracy);
  if (p.mode != EvalMode::ZeroShot) {
    std::printf("treated:  nll %.6f  ppl %.4f  acc %.4f  mean lambda %.4f\n", r.agg.mean_nll,
                r.agg.ppl, r.agg.accuracy, r.agg.mean_lambda);
    for (const TercileRow& t : r.terciles)
      std::printf("tercile %d (%d examples): ppl %.4f -> %.4f (nll %+.6f)\n", t.bucket, t.count,
                  t.baseline_ppl, t.treated_ppl, t.nll_delta);
    if (r.selective_threshold_used)
      std::printf("selective threshold: ppl %.4f\n", *r.selective_threshold_used);
  }
  std::printf("wrote %s/eval_%s.{json,csv} and timing sidecar\n", c.output_dir.c_str(),
              tag.c_str());
  return 0;
}

int cmd_sweep(const CommonOpts& o, const std::string& ckpt_path, const std::string& ref_path,
              const std::string& test_path) {
  RunConfig c = resolve_config(o);
  std::string ckpt = ckpt_path.empty() ? c.output_dir + "/model.ckpt" : ckpt_path;
  std::string ref = ref_path.empty() ? c.output_dir + "/ref.txt" : ref_path;
  std::string test = test_path.empty() ? c.output_dir + "/test.txt" : test_path;

  Model m = load_checkpoint(ckpt);
  Corpus ref_corpus = load_corpus(ref);
  Corpus test_corpus = load_corpus(test);

  SweepParams p = c.sweep;
  p.build = c.build;
  p.router = c.retrieval;
  SweepReport r = run_sweep(m, ref_corpus, test_corpus, p);

  std::printf("baseline: nll %.6f  ppl %.4f\n", r.baseline.mean_nll, r.baseline.ppl);
  for (const SweepRow& row : r.rows)
    std::printf("steps=%d ref_tokens=%d k=%d kernel=%s: nll %.6f  ppl %.4f  lambda %.4f\n",
                row.steps, row.ref_tokens, row.neighbors, row.kernel.c_str(), row.agg.mean_nll,
                row.agg.ppl, row.agg.mean_lambda);

  write_json_file(sweep_json(r), c.output_dir + "/sweep.json");
  ensure_parent_dir(c.output_dir + "/sweep.csv");
  write_file_text(c.output_dir + "/sweep.csv", sweep_csv(r));
  std::printf("wrote %s/sweep.json and %s/sweep.csv\n", c.output_dir.c_str(),
              c.output_dir.c_str());
  return 0;
}

// Gradient self-check: analytic gradients of the mean loss against central
// differences, one line per parameter tensor. The fixture seed is advanced
// until every routing decision sits clear of its top-k boundary, since a
// selection flip inside the probe step would invalidate the comparison.
int cmd_check() {
  ModelConfig mc;
  mc.vocab_size = 12;
  mc.dim = 8;
  mc.num_layers = 2;
  mc.num_heads = 2;
  mc.max_seq_len = 8;
  mc.num_experts = 4;
  mc.active_experts = 2;
  mc.expert_hidden = 16;
  mc.renormalize_topk = true;

  const int T = 6;
  const double step = 1e-4;
  const double tol = 1e-3;
  const double margin_floor = 5e-3;

  uint64_t seed = 0x636865636b;  // fixture tag
  Model m;
  std::vector<int> tokens;
  for (int attempt = 0;; ++attempt) {
    if (attempt >= 64) fail("check: no seed with clear top-k margins after 64 attempts");
    m = init_model(mc, seed + uint64_t(attempt));
    Rng tok_rng(mix_seed(seed + uint64_t(attempt), 0x746f6b));
    tokens.clear();
    for (int t = 0; t < T; ++t) tokens.push_back(int(tok_rng.below(uint64_t(mc.vocab_size))));

    ForwardResult fr = model_forward(m, tokens);
    double min_margin = 1e30;
    for (const MoeLayerResult& lay : fr.moe)
      for (int t = 0; t < T; ++t) {
        std::vector<double> row(lay.router_logits.row(t),
                                lay.router_logits.row(t) + mc.num_experts);
        std::sort(row.begin(), row.end(), std::greater<>());
        min_margin = std::min(
            min_margin, row[size_t(mc.active_experts) - 1] - row[size_t(mc.active_experts)]);
      }
    if (min_margin > margin_floor) break;
  }

  TraceOptions opts;
  opts.params_trainable = true;
  Trace tr = trace_forward(m, tokens, opts);
  tr.tape.backward(tr.mean_nll);

  bool all_ok = true;
  int coords = 0;
  double worst = 0.0;
  for (size_t pi = 0; pi < m.params.size(); ++pi) {
    const Tensor& grad = tr.tape.grad(tr.param_nodes[pi]);
    Tensor& value = m.params[pi].second;
    double max_err = 0.0;
    for (size_t c = 0; c < value.data.size(); ++c) {
      double saved = value.data[c];
      value.data[c] = saved + step;
      double up = model_forward(m, tokens).mean_nll;
      value.data[c] = saved - step;
      double down = model_forward(m, tokens).mean_nll;
      value.data[c] = saved;
      double fd = (up - down) / (2.0 * step);
      double g = grad.data[c];
      double err = std::abs(fd - g) / std::max(std::abs(g), 1e-8);
      max_err = std::max(max_err, err);
      ++coords;
    }
    bool ok = max_err <= tol;
    all_ok = all_ok && ok;
    worst = std::max(worst, max_err);
    std::printf("%s %-24s max_rel_err=%.3e\n", ok ? "PASS" : "FAIL",
                m.params[pi].first.c_str(), max_err);
  }
  std::printf("%s: %d tensors, %d coordinates, worst %.3e (tol %.0e)\n",
              all_ok ? "CHECK PASSED" : "CHECK FAILED", int(m.params.size()), coords, worst, tol);
  return all_ok ? 0 : 1;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"mixture-of-experts language model with retrieval-refined routing"};
  app.require_subcommand(1);

  CommonOpts common;

  CLI::App* show = app.add_subcommand("show-config", "print the resolved config as JSON");
  add_common(show, common);

  CLI::App* gen = app.add_subcommand("gen-data", "generate train/ref/test corpora");
  add_common(gen, common);

  std::string data_path, ckpt_path, mem_path, ref_path, test_path, mode_arg;

  CLI::App* train = app.add_subcommand("train", "train a model and save a checkpoint");
  add_common(train, common);
  train->add_option("--data", data_path, "training corpus (default <out>/train.txt)");
  train->add_option("--checkpoint", ckpt_path, "checkpoint to write (default <out>/model.ckpt)");

  CLI::App* build = app.add_subcommand("build-memory", "refine routings over a reference corpus");
  add_common(build, common);
  build->add_option("--checkpoint", ckpt_path, "checkpoint to read (default <out>/model.ckpt)");
  build->add_option("--ref", ref_path, "reference corpus (default <out>/ref.txt)");
  build->add_option("--memory", mem_path, "memory file to write (default <out>/memory.knn)");

  CLI::App* ev = app.add_subcommand("eval", "score a test corpus");
  add_common(ev, common);
  ev->add_option("--checkpoint", ckpt_path, "checkpoint to read (default <out>/model.ckpt)");
  ev->add_option("--memory", mem_path, "memory file (default <out>/memory.knn)");
  ev->add_option("--test", test_path, "test corpus (default <out>/test.txt)");
  ev->add_option("--mode", mode_arg, "zero-shot | knn | knn-selective (default from config)");

  CLI::App* sweep = app.add_subcommand("sweep", "grid over steps, reference size, k, kernel");
  add_common(sweep, common);
  sweep->add_option("--checkpoint", ckpt_path, "checkpoint to read (default <out>/model.ckpt)");
  sweep->add_option("--ref", ref_path, "reference corpus (default <out>/ref.txt)");
  sweep->add_option("--test", test_path, "test corpus (default <out>/test.txt)");

  CLI::App* check = app.add_subcommand("check", "verify analytic gradients by finite differences");
  (void)check;

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (show->parsed()) return cmd_show_config(common);
    if (gen->parsed()) return cmd_gen_data(common);
    if (train->parsed()) return cmd_train(common, data_path, ckpt_path);
    if (build->parsed()) return cmd_build_memory(common, ckpt_path, ref_path, mem_path);
    if (ev->parsed()) return cmd_eval(common, ckpt_path, mem_path, test_path, mode_arg);
    if (sweep->parsed()) return cmd_sweep(common, ckpt_path, ref_path, test_path);
    if (check->parsed()) return cmd_check();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace knnmoe
