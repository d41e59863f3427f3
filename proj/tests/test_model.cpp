#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "knnmoe/model.hpp"
#include "knnmoe/rng.hpp"

using namespace knnmoe;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 16;
  c.dim = 8;
  c.num_layers = 2;
  c.num_heads = 2;
  c.max_seq_len = 12;
  c.num_experts = 4;
  c.active_experts = 2;
  c.expert_hidden = 16;
  return c;
}

std::vector<int> tiny_tokens(const ModelConfig& c, int len, uint64_t seed) {
  Rng rng(seed);
  std::vector<int> out;
  for (int i = 0; i < len; ++i) out.push_back(int(rng.below(uint64_t(c.vocab_size))));
  return out;
}

bool same_bytes(const Tensor& a, const Tensor& b) {
  return a.rows == b.rows && a.cols == b.cols &&
         std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("pi keeps the top-k softmax mass") {
  // softmax([ln4, ln2, 0, 0]) = [1/2, 1/4, 1/8, 1/8]
  std::vector<double> logits = {std::log(4.0), std::log(2.0), 0.0, 0.0};

  GatingVector g = pi(logits, 2, false);
  REQUIRE(g.support() == 2);
  CHECK(g.entries[0].expert == 0);
  CHECK(g.entries[1].expert == 1);
  CHECK(g.entries[0].weight == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(g.entries[1].weight == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(g.weight_sum() == doctest::Approx(0.75).epsilon(1e-12));

  GatingVector r = pi(logits, 2, true);
  REQUIRE(r.support() == 2);
  CHECK(r.entries[0].weight == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(r.entries[1].weight == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(r.weight_sum() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("pi breaks ties toward lower expert indices") {
  std::vector<double> logits = {1.0, 1.0, 1.0, 1.0};
  GatingVector g = pi(logits, 2, false);
  REQUIRE(g.support() == 2);
  CHECK(g.entries[0].expert == 0);
  CHECK(g.entries[1].expert == 1);

  CHECK_THROWS_WITH_AS(pi(logits, 0, false), doctest::Contains("pi: k=0"), Error);
  CHECK_THROWS_WITH_AS(pi(logits, 5, false), doctest::Contains("out of range"), Error);
  CHECK_THROWS_WITH_AS(pi({}, 1, false), doctest::Contains("empty"), Error);
}

TEST_CASE("gating vectors round trip through dense form") {
  std::vector<double> dense = {0.0, 0.5, 0.0, 0.25};
  GatingVector g = GatingVector::from_dense(dense);
  REQUIRE(g.support() == 2);
  CHECK(g.entries[0].expert == 1);
  CHECK(g.entries[1].expert == 3);
  CHECK(g.weight_of(1) == 0.5);
  CHECK(g.weight_of(0) == 0.0);
  CHECK(g.to_dense(4) == dense);
  g.validate(4, "test");

  GatingVector bad;
  bad.entries = {{2, 0.5}, {1, 0.25}};
  CHECK_THROWS_WITH_AS(bad.validate(4, "test"), doctest::Contains("strictly increasing"), Error);
  bad.entries = {{1, -0.1}};
  CHECK_THROWS_WITH_AS(bad.validate(4, "test"), doctest::Contains("non-positive"), Error);
  bad.entries = {{1, 0.8}, {2, 0.8}};
  CHECK_THROWS_WITH_AS(bad.validate(4, "test"), doctest::Contains("mass"), Error);
  bad.entries = {{7, 0.5}};
  CHECK_THROWS_WITH_AS(bad.validate(4, "test"), doctest::Contains("out of range"), Error);
}

TEST_CASE("blend mixes over the union of supports") {
  GatingVector a, b;
  a.entries = {{0, 0.6}, {2, 0.4}};
  b.entries = {{1, 0.5}, {2, 0.5}};

  // lambda 0 must reproduce a exactly, entry for entry
  CHECK(blend(a, b, 0.0) == a);
  CHECK(blend(a, b, 1.0) == b);

  GatingVector m = blend(a, b, 0.25);
  REQUIRE(m.support() == 3);
  CHECK(m.entries[0].expert == 0);
  CHECK(m.entries[0].weight == doctest::Approx(0.45).epsilon(1e-12));
  CHECK(m.entries[1].expert == 1);
  CHECK(m.entries[1].weight == doctest::Approx(0.125).epsilon(1e-12));
  CHECK(m.entries[2].expert == 2);
  CHECK(m.entries[2].weight == doctest::Approx(0.4 * 0.75 + 0.5 * 0.25).epsilon(1e-12));
}

TEST_CASE("expert stack computes its closed form") {
  // W1 = [I | -I], W2 = [I; -I] makes the expert compute
  // silu(x) - silu(-x) = x, so a single fully-gated expert is the identity.
  int d = 4, H = 8;
  ad::Tape tape;
  Tensor u(2, d);
  Rng rng(9);
  for (double& v : u.data) v = rng.normal() * 0.7;

  Tensor w1 = Tensor::zeros(d, H), w2 = Tensor::zeros(H, d);
  for (int i = 0; i < d; ++i) {
    w1.at(i, i) = 1.0;
    w1.at(i, i + d) = -1.0;
    w2.at(i, i) = 1.0;
    w2.at(i + d, i) = -1.0;
  }
  Tensor gates(2, 1);
  gates.at(0, 0) = 1.0;
  gates.at(1, 0) = 1.0;

  ad::NodeId un = tape.leaf(u);
  ad::NodeId out = tape.moe_ffn(un, tape.constant(gates), {tape.constant(w1)},
                                {tape.constant(w2)});
  const Tensor& y = tape.value(out);
  for (size_t i = 0; i < u.data.size(); ++i)
    CHECK(y.data[i] == doctest::Approx(u.data[i]).epsilon(1e-12));
}

TEST_CASE("parameter layout is stable and seeds are reproducible") {
  ModelConfig c = tiny_config();
  c.moe_layers = {1};
  std::vector<ParamSpec> layout = param_layout(c);

  // layer 0 is dense, layer 1 holds the router and experts
  bool saw_dense = false, saw_router = false, saw_expert = false;
  for (const ParamSpec& s : layout) {
    if (s.name == "layer0.ffn.w1") saw_dense = true;
    if (s.name == "layer1.router") saw_router = true;
    if (s.name == "layer1.expert3.w2") saw_expert = true;
    CHECK(s.rows > 0);
    CHECK(s.cols > 0);
  }
  CHECK(saw_dense);
  CHECK(saw_router);
  CHECK(saw_expert);
  CHECK(layout.front().name == "tok_embed");
  CHECK(layout.back().name == "lm_head");

  Model a = init_model(c, 123), b = init_model(c, 123), other = init_model(c, 124);
  REQUIRE(a.params.size() == layout.size());
  for (size_t i = 0; i < a.params.size(); ++i) {
    CHECK(a.params[i].first == layout[i].name);
    CHECK(same_bytes(a.params[i].second, b.params[i].second));
  }
  CHECK_FALSE(same_bytes(a.param("tok_embed"), other.param("tok_embed")));
  CHECK_THROWS_WITH_AS(a.param("nope"), doctest::Contains("no parameter named"), Error);
}

TEST_CASE("forward pass shapes, determinism, and causality") {
  ModelConfig c = tiny_config();
  Model m = init_model(c, 7);
  std::vector<int> tokens = tiny_tokens(c, 10, 21);

  ForwardResult a = model_forward(m, tokens);
  CHECK(a.logits.rows == 10);
  CHECK(a.logits.cols == c.vocab_size);
  CHECK(a.num_targets == 9);
  CHECK(int(a.moe.size()) == c.num_layers);
  CHECK(a.token_nll.back() == 0.0);

  double mean = 0.0;
  for (int t = 0; t < 9; ++t) mean += a.token_nll[size_t(t)];
  CHECK(a.mean_nll == doctest::Approx(mean / 9.0).epsilon(1e-15));

  ForwardResult b = model_forward(m, tokens);
  CHECK(same_bytes(a.logits, b.logits));

  // flipping a later token must not disturb earlier rows
  std::vector<int> bumped = tokens;
  bumped[7] = (bumped[7] + 1) % c.vocab_size;
  ForwardResult d = model_forward(m, bumped);
  for (int t = 0; t < 7; ++t)
    CHECK(std::memcmp(a.logits.row(t), d.logits.row(t),
                      size_t(c.vocab_size) * sizeof(double)) == 0);
  CHECK(std::memcmp(a.logits.row(7), d.logits.row(7),
                    size_t(c.vocab_size) * sizeof(double)) != 0);
}

TEST_CASE("prefix rows equal full-sequence rows") {
  ModelConfig c = tiny_config();
  Model m = init_model(c, 11);
  std::vector<int> tokens = tiny_tokens(c, 9, 33);

  ForwardResult full = model_forward(m, tokens);
  for (int P = 1; P <= 9; ++P) {
    std::vector<int> prefix(tokens.begin(), tokens.begin() + P);
    ForwardResult part = model_forward(m, prefix);
    for (int t = 0; t < P; ++t)
      CHECK(std::memcmp(full.logits.row(t), part.logits.row(t),
                        size_t(c.vocab_size) * sizeof(double)) == 0);
  }
}

TEST_CASE("override replay reproduces the parametric forward bitwise") {
  ModelConfig c = tiny_config();
  Model m = init_model(c, 5);
  std::vector<int> tokens = tiny_tokens(c, 8, 55);

  ForwardResult base = model_forward(m, tokens);

  RoutingPlan plan;
  for (const MoeLayerResult& lay : base.moe) {
    std::vector<RouteDirective> dirs(tokens.size());
    for (size_t t = 0; t < tokens.size(); ++t) {
      dirs[t].kind = RouteKind::Override;
      dirs[t].gating = lay.gatings[t];
    }
    plan.layers[lay.layer_id] = std::move(dirs);
  }
  ForwardResult replay = model_forward(m, tokens, &plan);
  CHECK(same_bytes(base.logits, replay.logits));

  // overriding with a different gating must change the output
  RoutingPlan other = {};
  std::vector<RouteDirective> dirs(tokens.size());
  dirs[3].kind = RouteKind::Override;
  dirs[3].gating.entries = {{0, 1.0}};
  other.layers[base.moe[0].layer_id] = std::move(dirs);
  ForwardResult changed = model_forward(m, tokens, &other);
  CHECK_FALSE(same_bytes(base.logits, changed.logits));
}

TEST_CASE("gating hook sees router inputs and can override") {
  ModelConfig c = tiny_config();
  Model m = init_model(c, 5);
  std::vector<int> tokens = tiny_tokens(c, 8, 55);
  ForwardResult base = model_forward(m, tokens);

  // a hook that declines everywhere changes nothing
  RoutingPlan inert;
  int calls = 0;
  inert.hook = [&](int, int, std::span<const double>, const GatingVector&) {
    ++calls;
    return std::optional<GatingVector>{};
  };
  ForwardResult same = model_forward(m, tokens, &inert);
  CHECK(same_bytes(base.logits, same.logits));
  CHECK(calls == int(tokens.size()) * c.num_layers);

  // hook inputs must match the recorded router inputs and gatings
  RoutingPlan probing;
  bool inputs_ok = true;
  probing.hook = [&](int layer, int pos, std::span<const double> u,
                     const GatingVector& parametric) -> std::optional<GatingVector> {
    const MoeLayerResult* lay = nullptr;
    for (const MoeLayerResult& l : base.moe)
      if (l.layer_id == layer) lay = &l;
    if (!lay || int(u.size()) != c.dim) {
      inputs_ok = false;
      return std::nullopt;
    }
    for (int i = 0; i < c.dim; ++i)
      if (u[size_t(i)] != lay->router_input.at(pos, i)) inputs_ok = false;
    if (!(parametric == lay->gatings[size_t(pos)])) inputs_ok = false;
    return std::nullopt;
  };
  model_forward(m, tokens, &probing);
  CHECK(inputs_ok);

  // hook override at one position equals the plan-based override
  GatingVector forced;
  forced.entries = {{2, 1.0}};
  RoutingPlan hooked;
  hooked.hook = [&](int layer, int pos, std::span<const double>,
                    const GatingVector&) -> std::optional<GatingVector> {
    if (layer == 1 && pos == 4) return forced;
    return std::nullopt;
  };
  RoutingPlan planned;
  std::vector<RouteDirective> dirs(tokens.size());
  dirs[4].kind = RouteKind::Override;
  dirs[4].gating = forced;
  planned.layers[1] = std::move(dirs);
  ForwardResult via_hook = model_forward(m, tokens, &hooked);
  ForwardResult via_plan = model_forward(m, tokens, &planned);
  CHECK(same_bytes(via_hook.logits, via_plan.logits));
  CHECK_FALSE(same_bytes(base.logits, via_hook.logits));
}

TEST_CASE("learnable rows seeded with parametric logits change nothing") {
  ModelConfig c = tiny_config();
  Model m = init_model(c, 19);
  std::vector<int> tokens = tiny_tokens(c, 7, 77);
  ForwardResult base = model_forward(m, tokens);

  RoutingPlan plan;
  for (const MoeLayerResult& lay : base.moe) {
    std::vector<RouteDirective> dirs(tokens.size());
    for (size_t t = 0; t + 1 < tokens.size(); ++t) {
      dirs[t].kind = RouteKind::Learnable;
      dirs[t].logits_init.assign(lay.router_logits.row(int(t)),
                                 lay.router_logits.row(int(t)) + c.num_experts);
    }
    plan.layers[lay.layer_id] = std::move(dirs);
  }

  TraceOptions opts;
  opts.plan = &plan;
  Trace tr = trace_forward(m, tokens, opts);
  CHECK(same_bytes(base.logits, tr.tape.value(tr.logits)));

  // the merged rows sit behind a leaf that receives gradient
  tr.tape.backward(tr.mean_nll);
  bool any_grad = false;
  for (const MoeLayerTrace& lay : tr.moe) {
    REQUIRE(lay.learn_logits >= 0);
    const Tensor& g = tr.tape.grad(lay.learn_logits);
    for (double v : g.data) any_grad = any_grad || v != 0.0;
  }
  CHECK(any_grad);
}

TEST_CASE("moe layer subsets reject plans on dense layers") {
  ModelConfig c = tiny_config();
  c.moe_layers = {1};
  Model m = init_model(c, 3);
  std::vector<int> tokens = tiny_tokens(c, 6, 99);

  ForwardResult r = model_forward(m, tokens);
  REQUIRE(r.moe.size() == 1);
  CHECK(r.moe[0].layer_id == 1);

  RoutingPlan plan;
  plan.layers[0] = std::vector<RouteDirective>(tokens.size());
  CHECK_THROWS_WITH_AS(model_forward(m, tokens, &plan),
                       doctest::Contains("not a MoE layer"), Error);
}

TEST_CASE("config and input validation") {
  ModelConfig c = tiny_config();

  ModelConfig bad = c;
  bad.active_experts = 5;
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("active_experts"), Error);
  bad = c;
  bad.num_heads = 3;
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("num_heads"), Error);
  bad = c;
  bad.moe_layers = {0, 0};
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("strictly increasing"), Error);
  bad = c;
  bad.moe_layers = {2};
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("out of range"), Error);

  Model m = init_model(c, 1);
  CHECK_THROWS_WITH_AS(model_forward(m, std::vector<int>{}),
                       doctest::Contains("empty token sequence"), Error);
  CHECK_THROWS_WITH_AS(model_forward(m, tiny_tokens(c, c.max_seq_len + 1, 1)),
                       doctest::Contains("exceeds max_seq_len"), Error);
  std::vector<int> oob = {0, c.vocab_size};
  CHECK_THROWS_WITH_AS(model_forward(m, oob), doctest::Contains("out of range"), Error);

  RoutingPlan short_plan;
  short_plan.layers[1] = std::vector<RouteDirective>(2);
  CHECK_THROWS_WITH_AS(model_forward(m, tiny_tokens(c, 6, 2), &short_plan),
                       doctest::Contains("routing plan"), Error);
}
