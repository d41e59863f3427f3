#include "knnmoe/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>

#include "knnmoe/checkpoint.hpp"

namespace knnmoe {

std::string eval_mode_name(EvalMode m) {
  switch (m) {
    case EvalMode::ZeroShot:
      return "zero-shot";
    case EvalMode::KnnMoe:
      return "knn";
    case EvalMode::KnnMoeSelective:
      return "knn-selective";
  }
  fail("eval: unknown mode value");
}

EvalMode eval_mode_from_name(const std::string& name, const std::string& what) {
  if (name == "zero-shot") return EvalMode::ZeroShot;
  if (name == "knn") return EvalMode::KnnMoe;
  if (name == "knn-selective") return EvalMode::KnnMoeSelective;
  fail(what + ": unknown eval mode \"" + name +
       "\" (expected zero-shot, knn, or knn-selective)");
}

namespace {

uint64_t now_ns() {
  return uint64_t(std::chrono::duration_cast<std::chrono::nanoseconds>(
                      std::chrono::steady_clock::now().time_since_epoch())
                      .count());
}

ExampleStats score_example(const Model& m, const std::vector<int>& tokens, int id,
                           const RoutingPlan* plan) {
  uint64_t t0 = now_ns();
  ForwardResult fr = model_forward(m, tokens, plan);
  uint64_t t1 = now_ns();

  ExampleStats s;
  s.example_id = id;
  s.num_targets = fr.num_targets;
  s.nll = fr.mean_nll;
  s.ppl = std::exp(fr.mean_nll);
  int correct = 0;
  for (int t = 0; t + 1 < int(tokens.size()); ++t) {
    const double* row = fr.logits.row(t);
    int best = 0;
    for (int v = 1; v < fr.logits.cols; ++v)
      if (row[v] > row[best]) best = v;
    if (best == tokens[size_t(t) + 1]) ++correct;
  }
  s.accuracy = fr.num_targets > 0 ? double(correct) / fr.num_targets : 0.0;
  s.total_ns = t1 - t0;
  return s;
}

struct HookStats {
  double lambda_sum = 0.0;
  int decisions = 0;
  uint64_t retrieval_ns = 0;
};

// Retrieval applies at target positions; the final position predicts nothing
// and keeps its parametric routing.
RoutingPlan retrieval_plan(const MemoryFile& mem, const RouterParams& rp, int seq_len,
                           HookStats& hs) {
  RoutingPlan plan;
  plan.hook = [&mem, rp, seq_len, &hs](int layer, int pos, std::span<const double> key,
                                       const GatingVector& parametric)
      -> std::optional<GatingVector> {
    if (pos + 1 >= seq_len) return std::nullopt;
    const LayerMemory* lm = mem.layer(layer);
    if (!lm) {
      ++hs.decisions;
      return std::nullopt;
    }
    uint64_t t0 = now_ns();
    MixDecision dec = route(*lm, key, parametric, rp);
    hs.retrieval_ns += now_ns() - t0;
    hs.lambda_sum += dec.lambda;
    ++hs.decisions;
    if (dec.fallback) return std::nullopt;
    return std::move(dec.a_final);
  };
  return plan;
}

Aggregate aggregate_rows(const std::vector<ExampleStats>& rows) {
  Aggregate a;
  double w = 0.0;
  for (const ExampleStats& s : rows) {
    a.mean_nll += s.nll * s.num_targets;
    a.accuracy += s.accuracy * s.num_targets;
    a.mean_lambda += s.mean_lambda * s.num_targets;
    w += s.num_targets;
  }
  if (w > 0) {
    a.mean_nll /= w;
    a.accuracy /= w;
    a.mean_lambda /= w;
  }
  a.ppl = std::exp(a.mean_nll);
  return a;
}

std::vector<int> order_by_baseline_ppl(const std::vector<ExampleStats>& baseline) {
  std::vector<int> order(baseline.size());
  for (int i = 0; i < int(order.size()); ++i) order[size_t(i)] = i;
  std::sort(order.begin(), order.end(), [&](int x, int y) {
    if (baseline[size_t(x)].ppl != baseline[size_t(y)].ppl)
      return baseline[size_t(x)].ppl < baseline[size_t(y)].ppl;
    return x < y;
  });
  return order;
}

}  // namespace

std::vector<TercileRow> bucket_analysis(const std::vector<ExampleStats>& baseline,
                                        const std::vector<ExampleStats>& treated) {
  if (baseline.size() != treated.size()) fail("bucket_analysis: row count mismatch");
  int n = int(baseline.size());
  // Bucket 0 collects the hardest examples, so order by descending baseline
  // perplexity; equal perplexities fall to the lower bucket by example order.
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[size_t(i)] = i;
  std::sort(order.begin(), order.end(), [&](int x, int y) {
    if (baseline[size_t(x)].ppl != baseline[size_t(y)].ppl)
      return baseline[size_t(x)].ppl > baseline[size_t(y)].ppl;
    return x < y;
  });
  int c1 = n / 3, c2 = 2 * n / 3;

  std::vector<TercileRow> out(3);
  double weight[3] = {0.0, 0.0, 0.0};
  for (int b = 0; b < 3; ++b) out[size_t(b)].bucket = b;
  for (int pos = 0; pos < n; ++pos) {
    int b = pos < c1 ? 0 : (pos < c2 ? 1 : 2);
    int i = order[size_t(pos)];
    TercileRow& row = out[size_t(b)];
    double w = baseline[size_t(i)].num_targets;
    row.count += 1;
    row.baseline_nll += baseline[size_t(i)].nll * w;
    row.treated_nll += treated[size_t(i)].nll * w;
    weight[b] += w;
  }
  for (int b = 0; b < 3; ++b) {
    TercileRow& row = out[size_t(b)];
    if (weight[b] > 0) {
      row.baseline_nll /= weight[b];
      row.treated_nll /= weight[b];
    }
    row.baseline_ppl = std::exp(row.baseline_nll);
    row.treated_ppl = std::exp(row.treated_nll);
    row.nll_delta = row.treated_nll - row.baseline_nll;
  }
  return out;
}

EvalReport evaluate(const Model& m, const MemoryFile* mem, const Corpus& test,
                    const EvalParams& p, const std::vector<ExampleStats>* baseline_in) {
  test.validate("test corpus");
  if (test.vocab_size != m.cfg.vocab_size)
    fail("eval: corpus vocab " + std::to_string(test.vocab_size) + " does not match model vocab " +
         std::to_string(m.cfg.vocab_size));

  EvalReport r;
  r.mode = p.mode;
  r.model_fingerprint = model_fingerprint(m);
  r.router = p.router;

  if (p.mode != EvalMode::ZeroShot) {
    if (!mem) fail("eval: mode " + eval_mode_name(p.mode) + " needs a memory file");
    if (mem->model_fingerprint != r.model_fingerprint)
      fail("eval: memory was built for model " + mem->model_fingerprint +
           ", current model is " + r.model_fingerprint);
  }
  if (mem) r.build = mem->build;

  int n = int(test.sequences.size());
  if (baseline_in) {
    if (int(baseline_in->size()) != n) fail("eval: precomputed baseline row count mismatch");
    r.baseline = *baseline_in;
  } else {
    r.baseline.resize(size_t(n));
    parallel_for(n, [&](int i) {
      r.baseline[size_t(i)] = score_example(m, test.sequences[size_t(i)], i, nullptr);
    });
  }

  std::vector<uint8_t> gate(size_t(n), 1);
  if (p.mode == EvalMode::KnnMoeSelective) {
    double thr;
    if (p.selective_threshold) {
      thr = *p.selective_threshold;
    } else {
      std::vector<int> order = order_by_baseline_ppl(r.baseline);
      int cut = n / 3;
      thr = cut >= 1 ? r.baseline[size_t(order[size_t(cut) - 1])].ppl
                     : -std::numeric_limits<double>::infinity();
    }
    r.selective_threshold_used = thr;
    for (int i = 0; i < n; ++i) gate[size_t(i)] = r.baseline[size_t(i)].ppl <= thr ? 0 : 1;
  }

  if (p.mode == EvalMode::ZeroShot) {
    r.rows = r.baseline;
  } else {
    r.rows.resize(size_t(n));
    parallel_for(n, [&](int i) {
      const std::vector<int>& tokens = test.sequences[size_t(i)];
      if (!gate[size_t(i)]) {
        r.rows[size_t(i)] = r.baseline[size_t(i)];
        r.rows[size_t(i)].treated = false;
        return;
      }
      HookStats hs;
      RoutingPlan plan = retrieval_plan(*mem, p.router, int(tokens.size()), hs);
      ExampleStats s = score_example(m, tokens, i, &plan);
      s.treated = true;
      s.mean_lambda = hs.decisions > 0 ? hs.lambda_sum / hs.decisions : 0.0;
      s.retrieval_ns = hs.retrieval_ns;
      r.rows[size_t(i)] = std::move(s);
    });
  }

  r.agg_baseline = aggregate_rows(r.baseline);
  r.agg = aggregate_rows(r.rows);
  r.terciles = bucket_analysis(r.baseline, r.rows);
  return r;
}

namespace {

ojson aggregate_json(const Aggregate& a) {
  ojson j;
  j["mean_nll"] = a.mean_nll;
  j["ppl"] = a.ppl;
  j["accuracy"] = a.accuracy;
  j["mean_lambda"] = a.mean_lambda;
  return j;
}

}  // namespace

ojson report_json(const EvalReport& r) {
  ojson j;
  j["mode"] = eval_mode_name(r.mode);
  j["model_fingerprint"] = r.model_fingerprint;
  if (r.mode != EvalMode::ZeroShot) {
    ojson rt;
    rt["neighbors"] = r.router.neighbors;
    rt["kernel"] = kernel_name(r.router.kernel);
    rt["min_confidence"] = r.router.min_confidence;
    j["router"] = std::move(rt);
  }
  if (r.selective_threshold_used) j["selective_threshold"] = *r.selective_threshold_used;
  if (r.build) {
    ojson b;
    b["eta"] = r.build->eta;
    b["steps"] = r.build->steps;
    b["mode"] = r.build->mode;
    j["build"] = std::move(b);
  }
  j["baseline"] = aggregate_json(r.agg_baseline);
  j["aggregate"] = aggregate_json(r.agg);
  ojson terc = ojson::array();
  for (const TercileRow& t : r.terciles) {
    ojson e;
    e["bucket"] = t.bucket;
    e["count"] = t.count;
    e["baseline_nll"] = t.baseline_nll;
    e["treated_nll"] = t.treated_nll;
    e["nll_delta"] = t.nll_delta;
    e["baseline_ppl"] = t.baseline_ppl;
    e["treated_ppl"] = t.treated_ppl;
    terc.push_back(std::move(e));
  }
  j["terciles"] = std::move(terc);
  ojson rows = ojson::array();
  for (const ExampleStats& s : r.rows) {
    ojson e;
    e["example_id"] = s.example_id;
    e["num_targets"] = s.num_targets;
    e["nll"] = s.nll;
    e["ppl"] = s.ppl;
    e["accuracy"] = s.accuracy;
    e["mean_lambda"] = s.mean_lambda;
    e["treated"] = s.treated;
    rows.push_back(std::move(e));
  }
  j["examples"] = std::move(rows);
  return j;
}

ojson timing_json(const EvalReport& r) {
  uint64_t total = 0, retrieval = 0;
  ojson rows = ojson::array();
  for (const ExampleStats& s : r.rows) {
    total += s.total_ns;
    retrieval += s.retrieval_ns;
    ojson e;
    e["example_id"] = s.example_id;
    e["total_ns"] = s.total_ns;
    e["retrieval_ns"] = s.retrieval_ns;
    rows.push_back(std::move(e));
  }
  ojson j;
  j["total_ns"] = total;
  j["retrieval_ns"] = retrieval;
  j["examples"] = std::move(rows);
  return j;
}

std::string report_csv(const EvalReport& r) {
  std::string out = "example_id,num_targets,nll,ppl,accuracy,mean_lambda,treated\n";
  for (const ExampleStats& s : r.rows) {
    out += std::to_string(s.example_id);
    out += ',';
    out += std::to_string(s.num_targets);
    out += ',';
    out += ojson(s.nll).dump();
    out += ',';
    out += ojson(s.ppl).dump();
    out += ',';
    out += ojson(s.accuracy).dump();
    out += ',';
    out += ojson(s.mean_lambda).dump();
    out += ',';
    out += s.treated ? "1" : "0";
    out += '\n';
  }
  return out;
}

SweepReport run_sweep(const Model& m, const Corpus& ref, const Corpus& test,
                      const SweepParams& p) {
  if (p.refine_steps.empty() || p.ref_fractions.empty() || p.neighbors.empty() ||
      p.kernels.empty())
    fail("sweep: every axis needs at least one value");
  for (double f : p.ref_fractions)
    if (!(f > 0.0 && f <= 1.0)) fail("sweep: ref fractions must lie in (0,1]");

  SweepReport out;
  out.model_fingerprint = model_fingerprint(m);

  EvalParams zero;
  zero.mode = EvalMode::ZeroShot;
  EvalReport base = evaluate(m, nullptr, test, zero);
  out.baseline = base.agg_baseline;

  int ref_total = ref.predicted_tokens();
  std::map<std::pair<int, int>, MemoryFile> cache;  // (steps, ref_tokens)

  for (int steps : p.refine_steps) {
    for (double frac : p.ref_fractions) {
      int tokens = std::max(1, int(std::llround(frac * ref_total)));
      auto key = std::make_pair(steps, tokens);
      auto it = cache.find(key);
      if (it == cache.end()) {
        BuildParams bp = p.build;
        bp.steps = steps;
        bp.measure_tokens = false;
        Corpus sub = take_ref_tokens(ref, tokens);
        it = cache.emplace(key, build_memory(m, sub, bp)).first;
      }
      for (int k : p.neighbors) {
        for (const std::string& kn : p.kernels) {
          EvalParams ep;
          ep.mode = EvalMode::KnnMoe;
          ep.router = p.router;
          ep.router.neighbors = k;
          ep.router.kernel = kernel_from_name(kn, "sweep");
          EvalReport r = evaluate(m, &it->second, test, ep, &base.baseline);
          SweepRow row;
          row.steps = steps;
          row.ref_tokens = tokens;
          row.neighbors = k;
          row.kernel = kn;
          row.agg = r.agg;
          out.rows.push_back(std::move(row));
        }
      }
    }
  }
  return out;
}

ojson sweep_json(const SweepReport& r) {
  ojson j;
  j["model_fingerprint"] = r.model_fingerprint;
  j["baseline"] = aggregate_json(r.baseline);
  ojson rows = ojson::array();
  for (const SweepRow& s : r.rows) {
    ojson e;
    e["steps"] = s.steps;
    e["ref_tokens"] = s.ref_tokens;
    e["neighbors"] = s.neighbors;
    e["kernel"] = s.kernel;
    e["mean_nll"] = s.agg.mean_nll;
    e["ppl"] = s.agg.ppl;
    e["accuracy"] = s.agg.accuracy;
    e["mean_lambda"] = s.agg.mean_lambda;
    rows.push_back(std::move(e));
  }
  j["rows"] = std::move(rows);
  return j;
}

std::string sweep_csv(const SweepReport& r) {
  std::string out = "steps,ref_tokens,neighbors,kernel,mean_nll,ppl,accuracy,mean_lambda\n";
  for (const SweepRow& s : r.rows) {
    out += std::to_string(s.steps);
    out += ',';
    out += std::to_string(s.ref_tokens);
    out += ',';
    out += std::to_string(s.neighbors);
    out += ',';
    out += s.kernel;
    out += ',';
    out += ojson(s.agg.mean_nll).dump();
    out += ',';
    out += ojson(s.agg.ppl).dump();
    out += ',';
    out += ojson(s.agg.accuracy).dump();
    out += ',';
    out += ojson(s.agg.mean_lambda).dump();
    out += '\n';
  }
  return out;
}

}  // namespace knnmoe
