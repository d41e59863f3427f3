#include "knnmoe/trainer.hpp"

#include <cmath>

#include "knnmoe/rng.hpp"

namespace knnmoe {

TrainStats train_model(Model& m, const Corpus& corpus, const TrainParams& p) {
  if (p.steps < 1) fail("train: steps must be >= 1");
  if (p.batch_size < 1) fail("train: batch_size must be >= 1");
  if (!(p.lr > 0.0)) fail("train: lr must be > 0");
  if (p.momentum < 0.0 || p.momentum >= 1.0) fail("train: momentum must be in [0,1)");
  corpus.validate("train corpus");
  if (corpus.vocab_size != m.cfg.vocab_size)
    fail("train: corpus vocab " + std::to_string(corpus.vocab_size) + " does not match model vocab " +
         std::to_string(m.cfg.vocab_size));
  for (const auto& s : corpus.sequences) {
    if (int(s.size()) > m.cfg.max_seq_len)
      fail("train: corpus sequence of length " + std::to_string(s.size()) +
           " exceeds max_seq_len " + std::to_string(m.cfg.max_seq_len));
    if (s.size() < 2) fail("train: corpus sequence shorter than 2 tokens has no targets");
  }

  int np = int(m.params.size());
  std::vector<Tensor> velocity(static_cast<size_t>(np));
  std::vector<Tensor> grad(static_cast<size_t>(np));
  for (int i = 0; i < np; ++i) {
    velocity[size_t(i)] = Tensor(m.params[size_t(i)].second.rows, m.params[size_t(i)].second.cols);
    grad[size_t(i)] = Tensor(m.params[size_t(i)].second.rows, m.params[size_t(i)].second.cols);
  }

  // per-batch-item accumulation slots; reduction order is fixed by slot index
  std::vector<std::vector<Tensor>> slots(size_t(p.batch_size));
  std::vector<double> slot_loss(size_t(p.batch_size));

  Rng batch_rng(mix_seed(p.seed, 0x747261696eull));
  TrainStats stats;
  stats.steps = p.steps;

  double lr_min = p.lr * p.lr_min_frac;
  double inv_batch = 1.0 / p.batch_size;

  for (int step = 0; step < p.steps; ++step) {
    std::vector<int> picks(size_t(p.batch_size));
    for (int& idx : picks) idx = int(batch_rng.below(corpus.sequences.size()));

    parallel_for(p.batch_size, [&](int b) {
      const std::vector<int>& tokens = corpus.sequences[size_t(picks[size_t(b)])];
      TraceOptions opts;
      opts.params_trainable = true;
      Trace tr = trace_forward(m, tokens, opts);
      tr.tape.backward(tr.mean_nll);
      slot_loss[size_t(b)] = tr.tape.value(tr.mean_nll).data[0];
      std::vector<Tensor>& slot = slots[size_t(b)];
      slot.resize(size_t(np));
      for (int i = 0; i < np; ++i) slot[size_t(i)] = tr.tape.grad(tr.param_nodes[size_t(i)]);
    });

    double loss = 0.0;
    for (int b = 0; b < p.batch_size; ++b) loss += slot_loss[size_t(b)];
    loss *= inv_batch;
    if (!std::isfinite(loss))
      fail("train: loss diverged at step " + std::to_string(step) + " (batch mean " +
           std::to_string(loss) + ")");

    for (int i = 0; i < np; ++i) {
      Tensor& g = grad[size_t(i)];
      std::fill(g.data.begin(), g.data.end(), 0.0);
      for (int b = 0; b < p.batch_size; ++b) {
        const Tensor& s = slots[size_t(b)][size_t(i)];
        for (int e = 0; e < g.size(); ++e) g.data[size_t(e)] += s.data[size_t(e)];
      }
      for (double& v : g.data) v *= inv_batch;
    }

    double t = p.steps > 1 ? double(step) / double(p.steps - 1) : 1.0;
    double lr_t = lr_min + 0.5 * (p.lr - lr_min) * (1.0 + std::cos(3.14159265358979323846 * t));

    for (int i = 0; i < np; ++i) {
      Tensor& param = m.params[size_t(i)].second;
      Tensor& vel = velocity[size_t(i)];
      const Tensor& g = grad[size_t(i)];
      for (int e = 0; e < param.size(); ++e) {
        vel.data[size_t(e)] = p.momentum * vel.data[size_t(e)] - lr_t * g.data[size_t(e)];
        param.data[size_t(e)] += vel.data[size_t(e)];
      }
    }

    if (step == 0) stats.first_loss = loss;
    stats.final_loss = loss;
    if (p.log_every > 0 && (step % p.log_every == 0 || step == p.steps - 1))
      stats.loss_log.emplace_back(step, loss);
  }
  return stats;
}

}  // namespace knnmoe
