#pragma once

#include <optional>

#include "knnmoe/data.hpp"
#include "knnmoe/jsonutil.hpp"
#include "knnmoe/membuild.hpp"
#include "knnmoe/model.hpp"
#include "knnmoe/router.hpp"

namespace knnmoe {

enum class EvalMode : uint8_t { ZeroShot, KnnMoe, KnnMoeSelective };

std::string eval_mode_name(EvalMode m);
EvalMode eval_mode_from_name(const std::string& name, const std::string& what);

struct EvalParams {
  EvalMode mode = EvalMode::ZeroShot;
  RouterParams router;
  // Explicit perplexity gate for the selective mode; when unset the gate is
  // the baseline's lower-tercile boundary. Examples at or below the gate
  // keep parametric routing.
  std::optional<double> selective_threshold;
};

struct ExampleStats {
  int example_id = 0;
  int num_targets = 0;
  double nll = 0.0;  // mean per predicted token
  double ppl = 0.0;
  double accuracy = 0.0;  // argmax next-token hit rate
  double mean_lambda = 0.0;
  bool treated = false;      // retrieval was consulted
  uint64_t retrieval_ns = 0;  // wall clock, reported only in the timing sidecar
  uint64_t total_ns = 0;
};

struct Aggregate {
  double mean_nll = 0.0;  // token-weighted
  double ppl = 0.0;       // exp(mean_nll)
  double accuracy = 0.0;
  double mean_lambda = 0.0;
};

struct TercileRow {
  int bucket = 0;  // 0 = hardest (highest baseline ppl)
  int count = 0;
  double baseline_nll = 0.0;
  double treated_nll = 0.0;
  double nll_delta = 0.0;  // treated - baseline
  double baseline_ppl = 0.0;
  double treated_ppl = 0.0;
};

struct EvalReport {
  EvalMode mode = EvalMode::ZeroShot;
  std::string model_fingerprint;
  RouterParams router;
  std::optional<double> selective_threshold_used;
  std::optional<BuildInfo> build;  // copied from the memory file when present
  std::vector<ExampleStats> baseline;
  std::vector<ExampleStats> rows;  // treated rows; equals baseline in zero-shot
  Aggregate agg_baseline;
  Aggregate agg;
  std::vector<TercileRow> terciles;  // bucketed by baseline perplexity
};

// Scores the test corpus. The zero-shot baseline is always computed; knn
// modes run a second pass with retrieval hooked into every MoE layer at
// target positions. `mem` may be null only in zero-shot mode. A precomputed
// baseline (from an identical model and corpus) can be passed to skip the
// first pass.
EvalReport evaluate(const Model& m, const MemoryFile* mem, const Corpus& test,
                    const EvalParams& p, const std::vector<ExampleStats>* baseline = nullptr);

// Buckets examples into terciles of baseline perplexity (ties toward the
// lower bucket by example order) and reports per-bucket NLL/PPL shifts.
std::vector<TercileRow> bucket_analysis(const std::vector<ExampleStats>& baseline,
                                        const std::vector<ExampleStats>& treated);

// Deterministic report: no wall-clock content.
ojson report_json(const EvalReport& r);
// Volatile sidecar: per-example and total timings.
ojson timing_json(const EvalReport& r);
std::string report_csv(const EvalReport& r);

// ---------------------------------------------------------------------------
// Ablation sweep
// ---------------------------------------------------------------------------

struct SweepParams {
  std::vector<int> refine_steps = {1, 2, 4};
  std::vector<double> ref_fractions = {0.25, 0.5, 1.0};
  std::vector<int> neighbors = {1, 2, 4};
  std::vector<std::string> kernels = {"rbf", "cosine"};
  BuildParams build;    // eta and mode shared across the grid
  RouterParams router;  // min_confidence shared across the grid
};

struct SweepRow {
  int steps = 0;
  int ref_tokens = 0;
  int neighbors = 0;
  std::string kernel;
  Aggregate agg;
};

struct SweepReport {
  std::string model_fingerprint;
  Aggregate baseline;
  std::vector<SweepRow> rows;
};

// Evaluates the full (steps x fraction x neighbors x kernel) grid. Memories
// are built once per (steps, fraction) pair; neighbor count and kernel only
// affect query time. Fractions select reference prefixes by predicted-token
// count.
SweepReport run_sweep(const Model& m, const Corpus& ref, const Corpus& test,
                      const SweepParams& p);

ojson sweep_json(const SweepReport& r);
std::string sweep_csv(const SweepReport& r);

}  // namespace knnmoe
