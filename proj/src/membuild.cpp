#include "knnmoe/membuild.hpp"

#include <cmath>

#include "knnmoe/checkpoint.hpp"

namespace knnmoe {

std::string build_mode_name(BuildParams::Mode m) {
  return m == BuildParams::Mode::Strict ? "strict" : "fast";
}

BuildParams::Mode build_mode_from_name(const std::string& name, const std::string& what) {
  if (name == "strict") return BuildParams::Mode::Strict;
  if (name == "fast") return BuildParams::Mode::Fast;
  fail(what + ": unknown build mode \"" + name + "\" (expected strict or fast)");
}

GatingVector round_gating_f32(GatingVector g) {
  for (GateEntry& e : g.entries) e.weight = to_f32(e.weight);
  std::erase_if(g.entries, [](const GateEntry& e) { return e.weight == 0.0; });
  double sum = g.weight_sum();
  while (sum > 1.0) {
    size_t largest = 0;
    for (size_t i = 1; i < g.entries.size(); ++i)
      if (g.entries[i].weight > g.entries[largest].weight) largest = i;
    float w = float(g.entries[largest].weight);
    g.entries[largest].weight = double(std::nextafterf(w, 0.0f));
    sum = g.weight_sum();
  }
  return g;
}

Tensor round_tensor_f32(Tensor t) {
  for (double& v : t.data) v = to_f32(v);
  return t;
}

std::vector<Tensor> collect_keys(const Model& m, std::span<const int> tokens) {
  Trace tr = trace_forward(m, tokens);
  std::vector<Tensor> keys;
  keys.reserve(tr.moe.size());
  for (const MoeLayerTrace& mt : tr.moe) keys.push_back(tr.tape.value(mt.router_input));
  return keys;
}

SequenceRefinement refine_sequence(const Model& m, std::span<const int> tokens,
                                   const BuildParams& p) {
  if (!(p.eta > 0.0)) fail("build: eta must be > 0");
  if (p.steps < 0) fail("build: steps must be >= 0");
  int T = int(tokens.size());
  if (T < 2) fail("refine: sequence needs at least 2 tokens");

  SequenceRefinement out;
  {
    Trace base = trace_forward(m, tokens);
    const Tensor& nll = base.tape.value(base.token_nll);
    out.base_token_nll.assign(nll.data.begin(), nll.data.end());
    for (const MoeLayerTrace& mt : base.moe) {
      out.moe_layers.push_back(mt.layer_id);
      out.keys.push_back(base.tape.value(mt.router_input));
      out.initial_logits.push_back(base.tape.value(mt.router_logits));
    }
  }
  int L = int(out.moe_layers.size());
  out.refined_logits = out.initial_logits;

  int N = m.cfg.num_experts;
  for (int step = 0; step < p.steps; ++step) {
    RoutingPlan plan;
    for (int li = 0; li < L; ++li) {
      std::vector<RouteDirective> dirs(static_cast<size_t>(T));
      for (int t = 0; t + 1 < T; ++t) {
        dirs[size_t(t)].kind = RouteKind::Learnable;
        const double* row = out.refined_logits[size_t(li)].row(t);
        dirs[size_t(t)].logits_init.assign(row, row + N);
      }
      plan.layers[out.moe_layers[size_t(li)]] = std::move(dirs);
    }

    TraceOptions opts;
    opts.plan = &plan;
    Trace tr = trace_forward(m, tokens, opts);

    std::vector<Tensor> grads(size_t(L), Tensor(T, N));
    if (p.mode == BuildParams::Mode::Strict) {
      // each target descends its own loss; gradients are read row-by-row
      for (int t = 0; t + 1 < T; ++t) {
        ad::NodeId root = tr.tape.pick(tr.token_nll, t, 0);
        tr.tape.backward(root);
        for (int li = 0; li < L; ++li) {
          const Tensor& g = tr.tape.grad(tr.moe[size_t(li)].learn_logits);
          std::copy(g.row(t), g.row(t) + N, grads[size_t(li)].row(t));
        }
      }
    } else {
      ad::NodeId root = tr.tape.sum(tr.token_nll);
      tr.tape.backward(root);
      for (int li = 0; li < L; ++li) grads[size_t(li)] = tr.tape.grad(tr.moe[size_t(li)].learn_logits);
    }

    for (int li = 0; li < L; ++li) {
      Tensor& r = out.refined_logits[size_t(li)];
      const Tensor& g = grads[size_t(li)];
      for (int t = 0; t + 1 < T; ++t)
        for (int e = 0; e < N; ++e) r.at(t, e) -= p.eta * g.at(t, e);
    }
  }
  return out;
}

double isolated_token_nll(const Model& m, std::span<const int> tokens, int t,
                          const std::vector<std::pair<int, GatingVector>>& overrides) {
  int T = int(tokens.size());
  if (t < 0 || t + 1 >= T)
    fail("isolated_token_nll: position " + std::to_string(t) + " has no target in a length-" +
         std::to_string(T) + " sequence");
  int P = t + 2;  // prefix long enough to score position t
  RoutingPlan plan;
  for (const auto& [layer, gating] : overrides) {
    std::vector<RouteDirective> dirs(static_cast<size_t>(P));
    dirs[size_t(t)].kind = RouteKind::Override;
    dirs[size_t(t)].gating = gating;
    plan.layers[layer] = std::move(dirs);
  }
  TraceOptions opts;
  opts.plan = &plan;
  Trace tr = trace_forward(m, tokens.subspan(0, size_t(P)), opts);
  return tr.tape.value(tr.token_nll).at(t, 0);
}

namespace {

struct SeqBuild {
  // per layer: rounded keys and values of the positions that were stored
  std::vector<std::vector<std::vector<double>>> keys;  // [layer][entry][d]
  std::vector<std::vector<GatingVector>> values;       // [layer][entry]
  std::vector<TokenMeasure> tokens;
  int targets = 0;
  int stored = 0;
  double joint_before = 0.0;  // summed over targets
  double joint_after = 0.0;
};

}  // namespace

MemoryFile build_memory(const Model& m, const Corpus& ref, const BuildParams& p,
                        BuildReport* report) {
  ref.validate("reference corpus");
  if (ref.vocab_size != m.cfg.vocab_size)
    fail("build: corpus vocab " + std::to_string(ref.vocab_size) + " does not match model vocab " +
         std::to_string(m.cfg.vocab_size));

  std::vector<int> moe_layers = m.cfg.moe_layer_ids();
  int L = int(moe_layers.size());
  int S = int(ref.sequences.size());
  bool measure = p.measure_tokens || p.accept_only_improving;

  std::vector<SeqBuild> slots(static_cast<size_t>(S));
  parallel_for(S, [&](int si) {
    const std::vector<int>& tokens = ref.sequences[size_t(si)];
    SeqBuild& sb = slots[size_t(si)];
    sb.keys.resize(size_t(L));
    sb.values.resize(size_t(L));
    int T = int(tokens.size());
    if (T < 2) return;  // no targets, nothing to store

    SequenceRefinement refined = refine_sequence(m, tokens, p);
    sb.targets = T - 1;

    // refined gatings, rounded to their storage precision up front
    std::vector<std::vector<GatingVector>> gat(static_cast<size_t>(L));
    for (int li = 0; li < L; ++li) {
      gat[size_t(li)].resize(size_t(T) - 1);
      for (int t = 0; t + 1 < T; ++t) {
        GatingVector v = pi(refined.refined_logits[size_t(li)].row_span(t).subspan(0),
                            m.cfg.active_experts, m.cfg.renormalize_topk);
        gat[size_t(li)][size_t(t)] = round_gating_f32(std::move(v));
      }
    }

    for (int t = 0; t + 1 < T; ++t) {
      bool store = true;
      if (measure) {
        std::vector<std::pair<int, GatingVector>> ov;
        ov.reserve(size_t(L));
        for (int li = 0; li < L; ++li)
          ov.emplace_back(moe_layers[size_t(li)], gat[size_t(li)][size_t(t)]);
        TokenMeasure tm;
        tm.sequence = si;
        tm.position = t;
        tm.nll_before = refined.base_token_nll[size_t(t)];
        tm.nll_after = isolated_token_nll(m, tokens, t, ov);
        if (p.accept_only_improving && !(tm.nll_after < tm.nll_before)) store = false;
        tm.stored = store;
        sb.tokens.push_back(tm);
      }
      if (!store) continue;
      ++sb.stored;
      for (int li = 0; li < L; ++li) {
        std::span<const double> key = refined.keys[size_t(li)].row_span(t);
        std::vector<double> rounded(key.begin(), key.end());
        for (double& v : rounded) v = to_f32(v);
        sb.keys[size_t(li)].push_back(std::move(rounded));
        sb.values[size_t(li)].push_back(gat[size_t(li)][size_t(t)]);
      }
    }

    if (!report) return;  // the joint replay below only feeds the report

    // joint effect: every stored position overridden at once
    double before = 0.0;
    for (int t = 0; t + 1 < T; ++t) before += refined.base_token_nll[size_t(t)];
    sb.joint_before = before;
    {
      RoutingPlan plan;
      for (int li = 0; li < L; ++li) {
        std::vector<RouteDirective> dirs(static_cast<size_t>(T));
        size_t entry = 0;
        for (int t = 0; t + 1 < T; ++t) {
          bool stored_t = !measure || sb.tokens[size_t(t)].stored;
          if (!stored_t) continue;
          dirs[size_t(t)].kind = RouteKind::Override;
          dirs[size_t(t)].gating = sb.values[size_t(li)][entry++];
        }
        plan.layers[moe_layers[size_t(li)]] = std::move(dirs);
      }
      TraceOptions opts;
      opts.plan = &plan;
      Trace tr = trace_forward(m, tokens, opts);
      const Tensor& nll = tr.tape.value(tr.token_nll);
      double after = 0.0;
      for (int t = 0; t + 1 < T; ++t) after += nll.at(t, 0);
      sb.joint_after = after;
    }
  });

  MemoryFile mf;
  mf.model_fingerprint = model_fingerprint(m);
  mf.dim = m.cfg.dim;
  mf.num_experts = m.cfg.num_experts;
  mf.active_experts = m.cfg.active_experts;
  mf.kernel = p.kernel;
  mf.build.eta = p.eta;
  mf.build.steps = p.steps;
  mf.build.mode = build_mode_name(p.mode);

  for (int li = 0; li < L; ++li) {
    LayerMemory lm;
    lm.layer_id = moe_layers[size_t(li)];
    lm.dim = m.cfg.dim;
    int count = 0;
    for (const SeqBuild& sb : slots) count += int(sb.keys[size_t(li)].size());
    lm.keys = Tensor(count, m.cfg.dim);
    lm.values.reserve(size_t(count));
    int row = 0;
    for (const SeqBuild& sb : slots) {
      for (size_t e = 0; e < sb.keys[size_t(li)].size(); ++e) {
        std::copy(sb.keys[size_t(li)][e].begin(), sb.keys[size_t(li)][e].end(), lm.keys.row(row));
        lm.values.push_back(sb.values[size_t(li)][e]);
        ++row;
      }
    }
    lm.gamma = estimate_gamma(lm.keys);
    mf.layers.push_back(std::move(lm));
  }

  if (report) {
    *report = BuildReport{};
    report->sequences = S;
    double delta_sum = 0.0;
    double before_sum = 0.0, after_sum = 0.0;
    int targets_total = 0;
    for (const SeqBuild& sb : slots) {
      report->target_positions += sb.targets;
      report->stored_positions += sb.stored;
      before_sum += sb.joint_before;
      after_sum += sb.joint_after;
      targets_total += sb.targets;
      for (const TokenMeasure& tm : sb.tokens) {
        if (tm.nll_after < tm.nll_before) ++report->improved;
        delta_sum += tm.nll_after - tm.nll_before;
        report->tokens.push_back(tm);
      }
    }
    if (!report->tokens.empty()) report->mean_isolated_delta = delta_sum / report->tokens.size();
    if (targets_total > 0) {
      report->joint_nll_before = before_sum / targets_total;
      report->joint_nll_after = after_sum / targets_total;
    }
  }
  return mf;
}

}  // namespace knnmoe
