#include "knnmoe/model.hpp"

#include <algorithm>
#include <cmath>

#include "knnmoe/rng.hpp"

namespace knnmoe {

void ModelConfig::validate() const {
  if (vocab_size < 2) fail("config: vocab_size must be >= 2");
  if (dim < 1) fail("config: dim must be >= 1");
  if (num_layers < 1) fail("config: num_layers must be >= 1");
  if (num_heads < 1 || dim % num_heads != 0)
    fail("config: num_heads must divide dim, got dim=" + std::to_string(dim) +
         " heads=" + std::to_string(num_heads));
  if (max_seq_len < 2) fail("config: max_seq_len must be >= 2");
  if (num_experts < 1) fail("config: num_experts must be >= 1");
  if (active_experts < 1 || active_experts > num_experts)
    fail("config: active_experts must be in [1," + std::to_string(num_experts) + "], got " +
         std::to_string(active_experts));
  if (expert_hidden < 1) fail("config: expert_hidden must be >= 1");
  int prev = -1;
  for (int l : moe_layers) {
    if (l < 0 || l >= num_layers)
      fail("config: moe layer " + std::to_string(l) + " out of range [0," +
           std::to_string(num_layers) + ")");
    if (l <= prev) fail("config: moe_layers must be strictly increasing");
    prev = l;
  }
}

bool ModelConfig::is_moe_layer(int layer) const {
  if (moe_layers.empty()) return true;
  return std::binary_search(moe_layers.begin(), moe_layers.end(), layer);
}

std::vector<int> ModelConfig::moe_layer_ids() const {
  if (!moe_layers.empty()) return moe_layers;
  std::vector<int> all(static_cast<size_t>(num_layers));
  for (int i = 0; i < num_layers; ++i) all[size_t(i)] = i;
  return all;
}

Tensor& Model::param(std::string_view name) {
  int i = param_index(name);
  if (i < 0) fail("model: no parameter named " + std::string(name));
  return params[size_t(i)].second;
}

const Tensor& Model::param(std::string_view name) const {
  int i = param_index(name);
  if (i < 0) fail("model: no parameter named " + std::string(name));
  return params[size_t(i)].second;
}

int Model::param_index(std::string_view name) const {
  for (int i = 0; i < int(params.size()); ++i)
    if (params[size_t(i)].first == name) return i;
  return -1;
}

namespace {

Tensor randn(Rng& rng, int r, int c, double scale) {
  Tensor t(r, c);
  for (double& v : t.data) v = rng.normal() * scale;
  return t;
}

Tensor ones_row(int n) {
  Tensor t(1, n);
  std::fill(t.data.begin(), t.data.end(), 1.0);
  return t;
}

constexpr double kNormEps = 1e-6;

}  // namespace

std::vector<ParamSpec> param_layout(const ModelConfig& cfg) {
  int d = cfg.dim, H = cfg.expert_hidden;
  std::vector<ParamSpec> out;
  out.push_back({"tok_embed", cfg.vocab_size, d});
  out.push_back({"pos_embed", cfg.max_seq_len, d});
  for (int l = 0; l < cfg.num_layers; ++l) {
    std::string p = "layer" + std::to_string(l) + ".";
    out.push_back({p + "attn_norm", 1, d});
    out.push_back({p + "wq", d, d});
    out.push_back({p + "wk", d, d});
    out.push_back({p + "wv", d, d});
    out.push_back({p + "wo", d, d});
    out.push_back({p + "ffn_norm", 1, d});
    if (cfg.is_moe_layer(l)) {
      out.push_back({p + "router", d, cfg.num_experts});
      for (int e = 0; e < cfg.num_experts; ++e) {
        std::string q = p + "expert" + std::to_string(e) + ".";
        out.push_back({q + "w1", d, H});
        out.push_back({q + "w2", H, d});
      }
    } else {
      out.push_back({p + "ffn.w1", d, H});
      out.push_back({p + "ffn.w2", H, d});
    }
  }
  out.push_back({"final_norm", 1, d});
  out.push_back({"lm_head", d, cfg.vocab_size});
  return out;
}

Model init_model(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  Rng rng(mix_seed(seed, 0x6d6f64656c));

  for (const ParamSpec& spec : param_layout(cfg)) {
    bool is_norm = spec.name.ends_with("_norm");
    bool is_embed = spec.name == "tok_embed" || spec.name == "pos_embed";
    bool is_router = spec.name.ends_with(".router");
    Tensor t;
    if (is_norm)
      t = ones_row(spec.cols);
    else if (is_embed || is_router)
      t = randn(rng, spec.rows, spec.cols, 0.02);
    else
      t = randn(rng, spec.rows, spec.cols, 1.0 / std::sqrt(double(spec.rows)));
    m.params.emplace_back(spec.name, std::move(t));
  }
  return m;
}

void merge_rows(RoutingPlan& plan, int layer, int seq_len,
                const std::vector<std::pair<int, RouteDirective>>& updates) {
  auto it = plan.layers.find(layer);
  if (it == plan.layers.end())
    it = plan.layers.emplace(layer, std::vector<RouteDirective>(size_t(seq_len))).first;
  else if (int(it->second.size()) != seq_len)
    fail("routing plan: layer " + std::to_string(layer) + " already covers " +
         std::to_string(it->second.size()) + " positions, cannot merge for length " +
         std::to_string(seq_len));
  for (const auto& [pos, dir] : updates) {
    if (pos < 0 || pos >= seq_len)
      fail("routing plan: position " + std::to_string(pos) + " out of range [0," +
           std::to_string(seq_len) + ")");
    it->second[size_t(pos)] = dir;
  }
}

namespace {

// Resolved directives for one MoE layer of one trace.
struct LayerPlanView {
  const std::vector<RouteDirective>* dirs = nullptr;  // null means all-parametric

  RouteKind kind(int pos) const {
    return dirs ? (*dirs)[size_t(pos)].kind : RouteKind::Parametric;
  }
  const RouteDirective& dir(int pos) const { return (*dirs)[size_t(pos)]; }
};

LayerPlanView plan_view(const RoutingPlan* plan, const ModelConfig& cfg, int layer, int T) {
  LayerPlanView v;
  if (!plan) return v;
  auto it = plan->layers.find(layer);
  if (it == plan->layers.end()) return v;
  if (int(it->second.size()) != T)
    fail("routing plan: layer " + std::to_string(layer) + " has " +
         std::to_string(it->second.size()) + " directives for a sequence of length " +
         std::to_string(T));
  for (int pos = 0; pos < T; ++pos) {
    const RouteDirective& d = it->second[size_t(pos)];
    if (d.kind == RouteKind::Override)
      d.gating.validate(cfg.num_experts,
                        "routing plan override at layer " + std::to_string(layer) + " pos " +
                            std::to_string(pos));
    if (d.kind == RouteKind::Learnable && int(d.logits_init.size()) != cfg.num_experts)
      fail("routing plan: learnable logits at layer " + std::to_string(layer) + " pos " +
           std::to_string(pos) + " have " + std::to_string(d.logits_init.size()) +
           " entries, expected " + std::to_string(cfg.num_experts));
  }
  v.dirs = &it->second;
  return v;
}

}  // namespace

Trace trace_forward(const Model& m, std::span<const int> tokens, const TraceOptions& opts) {
  const ModelConfig& cfg = m.cfg;
  int T = int(tokens.size());
  if (T < 1) fail("forward: empty token sequence");
  if (T > cfg.max_seq_len)
    fail("forward: sequence length " + std::to_string(T) + " exceeds max_seq_len " +
         std::to_string(cfg.max_seq_len));
  for (int t : tokens)
    if (t < 0 || t >= cfg.vocab_size)
      fail("forward: token id " + std::to_string(t) + " out of range [0," +
           std::to_string(cfg.vocab_size) + ")");
  if (opts.plan)
    for (const auto& [layer, dirs] : opts.plan->layers)
      if (!cfg.is_moe_layer(layer))
        fail("routing plan: layer " + std::to_string(layer) + " is not a MoE layer");

  Trace tr;
  tr.tokens.assign(tokens.begin(), tokens.end());
  tr.targets.resize(size_t(T));
  for (int t = 0; t + 1 < T; ++t) tr.targets[size_t(t)] = tokens[size_t(t) + 1];
  tr.targets[size_t(T) - 1] = -1;
  tr.num_targets = T - 1;

  ad::Tape& tape = tr.tape;
  tr.param_nodes.reserve(m.params.size());
  for (const auto& [name, value] : m.params)
    tr.param_nodes.push_back(opts.params_trainable ? tape.leaf(value) : tape.constant(value));
  auto pnode = [&](std::string_view name) { return tr.param_nodes[size_t(m.param_index(name))]; };

  std::vector<int> positions(static_cast<size_t>(T));
  for (int t = 0; t < T; ++t) positions[size_t(t)] = t;

  ad::NodeId x = tape.add(tape.embedding(pnode("tok_embed"), tr.tokens),
                          tape.embedding(pnode("pos_embed"), positions));

  int dh = cfg.dim / cfg.num_heads;
  double attn_scale = 1.0 / std::sqrt(double(dh));

  for (int l = 0; l < cfg.num_layers; ++l) {
    std::string p = "layer" + std::to_string(l) + ".";

    // attention
    ad::NodeId an = tape.mul_rowvec(tape.rms_norm_rows(x, kNormEps), pnode(p + "attn_norm"));
    ad::NodeId q = tape.matmul(an, pnode(p + "wq"));
    ad::NodeId k = tape.matmul(an, pnode(p + "wk"));
    ad::NodeId v = tape.matmul(an, pnode(p + "wv"));
    std::vector<ad::NodeId> heads;
    heads.reserve(size_t(cfg.num_heads));
    for (int h = 0; h < cfg.num_heads; ++h) {
      int c0 = h * dh, c1 = c0 + dh;
      ad::NodeId qh = tape.slice_cols(q, c0, c1);
      ad::NodeId kh = tape.slice_cols(k, c0, c1);
      ad::NodeId vh = tape.slice_cols(v, c0, c1);
      ad::NodeId att = tape.causal_softmax_rows(tape.scale(tape.matmul_nt(qh, kh), attn_scale));
      heads.push_back(tape.matmul(att, vh));
    }
    ad::NodeId attn_out = tape.matmul(tape.concat_cols(heads), pnode(p + "wo"));
    x = tape.add(x, attn_out);

    // feed-forward
    ad::NodeId u = tape.mul_rowvec(tape.rms_norm_rows(x, kNormEps), pnode(p + "ffn_norm"));
    ad::NodeId y;
    if (cfg.is_moe_layer(l)) {
      MoeLayerTrace mt;
      mt.layer_id = l;
      mt.router_input = u;

      ad::NodeId rl = tape.matmul(u, pnode(p + "router"));
      LayerPlanView view = plan_view(opts.plan, cfg, l, T);

      // learnable rows replace the parametric logits before the gating graph
      mt.learn_rows.assign(size_t(T), 0);
      bool any_learn = false;
      if (view.dirs) {
        Tensor init(T, cfg.num_experts);
        for (int pos = 0; pos < T; ++pos) {
          if (view.kind(pos) != RouteKind::Learnable) continue;
          any_learn = true;
          mt.learn_rows[size_t(pos)] = 1;
          const std::vector<double>& li = view.dir(pos).logits_init;
          std::copy(li.begin(), li.end(), init.row(pos));
        }
        if (any_learn) {
          mt.learn_logits = tape.leaf(std::move(init));
          rl = tape.merge_rows(rl, mt.learn_logits, mt.learn_rows);
        }
      }
      mt.router_logits = rl;

      ad::NodeId gat = tape.topk_zero_rows(tape.softmax_rows(rl), cfg.active_experts);
      if (cfg.renormalize_topk) gat = tape.normalize_rows(gat);

      // overrides: plan directives first, then the hook at parametric rows
      std::vector<uint8_t> ov_rows(size_t(T), 0);
      Tensor ov(T, cfg.num_experts);
      bool any_ov = false;
      for (int pos = 0; pos < T; ++pos) {
        if (view.kind(pos) == RouteKind::Override) {
          std::vector<double> dense = view.dir(pos).gating.to_dense(cfg.num_experts);
          std::copy(dense.begin(), dense.end(), ov.row(pos));
          ov_rows[size_t(pos)] = 1;
          any_ov = true;
        } else if (view.kind(pos) == RouteKind::Parametric && opts.plan && opts.plan->hook) {
          GatingVector parametric =
              GatingVector::from_dense(tape.value(gat).row_span(pos));
          std::optional<GatingVector> hooked =
              opts.plan->hook(l, pos, tape.value(u).row_span(pos), parametric);
          if (hooked) {
            hooked->validate(cfg.num_experts, "gating hook at layer " + std::to_string(l) +
                                                  " pos " + std::to_string(pos));
            std::vector<double> dense = hooked->to_dense(cfg.num_experts);
            std::copy(dense.begin(), dense.end(), ov.row(pos));
            ov_rows[size_t(pos)] = 1;
            any_ov = true;
          }
        }
      }
      if (any_ov) gat = tape.merge_rows(gat, tape.constant(std::move(ov)), ov_rows);
      mt.gating = gat;

      std::vector<ad::NodeId> w1s, w2s;
      for (int e = 0; e < cfg.num_experts; ++e) {
        std::string q2 = p + "expert" + std::to_string(e) + ".";
        w1s.push_back(pnode(q2 + "w1"));
        w2s.push_back(pnode(q2 + "w2"));
      }
      y = tape.moe_ffn(u, gat, w1s, w2s);
      tr.moe.push_back(std::move(mt));
    } else {
      y = tape.matmul(tape.silu(tape.matmul(u, pnode(p + "ffn.w1"))), pnode(p + "ffn.w2"));
    }
    x = tape.add(x, y);
  }

  ad::NodeId fin = tape.mul_rowvec(tape.rms_norm_rows(x, kNormEps), pnode("final_norm"));
  tr.logits = tape.matmul(fin, pnode("lm_head"));
  tr.token_nll = tape.cross_entropy_rows(tr.logits, tr.targets);
  tr.mean_nll = tr.num_targets > 0 ? tape.scale(tape.sum(tr.token_nll), 1.0 / tr.num_targets)
                                   : tape.sum(tr.token_nll);
  return tr;
}

ForwardResult model_forward(const Model& m, std::span<const int> tokens,
                            const RoutingPlan* plan) {
  TraceOptions opts;
  opts.plan = plan;
  Trace tr = trace_forward(m, tokens, opts);

  ForwardResult fr;
  fr.logits = tr.tape.value(tr.logits);
  const Tensor& nll = tr.tape.value(tr.token_nll);
  fr.token_nll.assign(nll.data.begin(), nll.data.end());
  fr.mean_nll = tr.tape.value(tr.mean_nll).data[0];
  fr.num_targets = tr.num_targets;
  for (const MoeLayerTrace& mt : tr.moe) {
    MoeLayerResult r;
    r.layer_id = mt.layer_id;
    r.router_input = tr.tape.value(mt.router_input);
    r.router_logits = tr.tape.value(mt.router_logits);
    const Tensor& g = tr.tape.value(mt.gating);
    r.gatings.reserve(size_t(g.rows));
    for (int t = 0; t < g.rows; ++t) r.gatings.push_back(GatingVector::from_dense(g.row_span(t)));
    fr.moe.push_back(std::move(r));
  }
  return fr;
}

}  // namespace knnmoe
