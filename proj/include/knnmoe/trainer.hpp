#pragma once

#include "knnmoe/data.hpp"
#include "knnmoe/model.hpp"

namespace knnmoe {

struct TrainParams {
  int steps = 2000;
  int batch_size = 16;
  double lr = 0.01;
  double momentum = 0.9;
  double lr_min_frac = 0.1;  // cosine decay floor as a fraction of lr
  int log_every = 100;
  uint64_t seed = 0;  // batch sampling
};

struct TrainStats {
  int steps = 0;
  double first_loss = 0.0;
  double final_loss = 0.0;
  std::vector<std::pair<int, double>> loss_log;  // (step, batch mean loss)
};

// SGD with momentum and cosine learning-rate decay. Batch items run in
// parallel but accumulate into per-item slots reduced in a fixed order, so
// the result is independent of the worker count. A non-finite batch loss
// aborts with an error naming the step.
TrainStats train_model(Model& m, const Corpus& corpus, const TrainParams& p);

}  // namespace knnmoe
