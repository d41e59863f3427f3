#pragma once

#include <optional>
#include <string>

#include "knnmoe/data.hpp"
#include "knnmoe/eval.hpp"
#include "knnmoe/jsonutil.hpp"
#include "knnmoe/membuild.hpp"
#include "knnmoe/model.hpp"
#include "knnmoe/router.hpp"
#include "knnmoe/trainer.hpp"

namespace knnmoe {

struct CorpusConfig {
  int domain_id = 0;
  std::string kind = "markov2";
  int sequences = 0;
  int seq_len = 0;

  // The vocabulary always comes from the model section.
  DomainSpec domain(int vocab_size) const { return {domain_id, kind, vocab_size}; }
};

// Every RNG in a run derives from one master seed through fixed role tags,
// so a config reproduces the whole pipeline from a single number.
struct SeedPlan {
  uint64_t master = 42;

  uint64_t model_init() const;
  uint64_t trainer() const;
  uint64_t data_train() const;
  uint64_t data_ref() const;
  uint64_t data_test() const;
};

struct RunConfig {
  ModelConfig model;
  CorpusConfig train_data{0, "markov2", 512, 64};
  CorpusConfig ref_data{1, "markov2", 96, 64};
  CorpusConfig test_data{1, "markov2", 96, 64};
  TrainParams train;  // seed field ignored; the plan supplies it
  BuildParams build;
  RouterParams retrieval;
  EvalMode eval_mode = EvalMode::KnnMoe;
  std::optional<double> selective_threshold;
  SweepParams sweep;  // build/router subfields ignored; shared sections apply
  SeedPlan seeds;
  std::string output_dir = "out";

  void validate() const;
};

RunConfig default_config();

// Strict parse: unknown keys anywhere in the tree are errors. Absent keys
// take the defaults above.
RunConfig config_from_json(const ojson& j, const std::string& what);

// Fully resolved form; config_from_json(config_json(c)) round-trips.
ojson config_json(const RunConfig& c);

RunConfig load_config(const std::string& path);

// Applies one dotted assignment like "train.steps=500" onto the JSON tree.
// The value is parsed as JSON when it parses (numbers, booleans, arrays);
// anything else is taken as a bare string. Validation happens at the
// config_from_json call that follows.
void apply_override(ojson& j, const std::string& assignment, const std::string& what);

}  // namespace knnmoe
