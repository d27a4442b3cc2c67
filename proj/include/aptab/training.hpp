#pragma once

// Prior fitting: every step draws m episodes per accumulation micro-step
// (ordinary slots from fresh generators, adversarial slots from the agent
// pool), descends the model on the mean NLL and ascends the agents on the
// same backward pass.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "aptab/agents.hpp"
#include "aptab/checkpoint.hpp"
#include "aptab/model.hpp"
#include "aptab/optim.hpp"
#include "aptab/prior.hpp"

namespace aptab {

enum class EvalSuite { kNone, kLinearBoundary, kPrior };
std::string_view to_string(EvalSuite suite);
EvalSuite parse_eval_suite(std::string_view text);

struct TrainConfig {
  ModelConfig model;
  GeneratorHyperSpace prior;
  AgentConfig agents;  // agents.slots is m, the episodes per micro-step
  Real lr = 1e-4;
  std::size_t accumulation = 1;
  std::size_t budget = 6'400'000;  // total datasets
  std::uint64_t seed = 0;

  std::size_t eval_every = 100;  // steps; 0 disables evaluation and checkpoints
  EvalSuite eval_suite = EvalSuite::kLinearBoundary;
  std::size_t eval_episodes = 50;
  std::uint64_t eval_seed = 20240;

  std::filesystem::path output_dir;  // empty: nothing written

  std::size_t effective_batch() const { return agents.slots * accumulation; }
  std::size_t total_steps() const { return budget / effective_batch(); }
  void validate() const;
};

nlohmann::json to_json(const GeneratorHyperSpace& space);
GeneratorHyperSpace hyperspace_from_json(const nlohmann::json& j);
nlohmann::json to_json(const AgentConfig& config);
AgentConfig agent_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct StepRecord {
  std::size_t step = 0;
  double nll = 0;              // mean over the step's episodes
  double ordinary_nll = 0;
  double adversarial_nll = 0;  // NaN when no adversarial slots
  bool skipped = false;        // non-finite model gradient
};

struct EvalRecord {
  std::size_t step = 0;
  double auc = 0;  // NaN for regression suites
  double nll = 0;
};

struct ResetRecord {
  std::size_t step = 0;
  std::size_t slot = 0;
  ResetReason reason = ResetReason::kPeriod;
  std::size_t resets = 0;
};

struct NanRecord {
  std::size_t step = 0;
  std::string what;  // "model" or "agent"
  std::size_t slot = 0;
};

// Newline-delimited JSON records, also kept in memory.
class TrainLog {
 public:
  void attach(std::ostream* sink) { sink_ = sink; }
  void add(const StepRecord& r);
  void add(const EvalRecord& r);
  void add(const ResetRecord& r);
  void add(const NanRecord& r);
  void flush();

  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;
  std::vector<ResetRecord> resets;
  std::vector<NanRecord> nans;

 private:
  void emit(const nlohmann::json& record);
  std::ostream* sink_ = nullptr;
};

nlohmann::json to_json(const StepRecord& r);
nlohmann::json to_json(const EvalRecord& r);
nlohmann::json to_json(const ResetRecord& r);
nlohmann::json to_json(const NanRecord& r);

// Held-out evaluation episodes: x ~ N(0, I_2), y = 1[w.x + b > 0], n = 200
// split 160/40, both classes present on each side.
std::vector<Episode> linear_boundary_episodes(std::size_t count, std::uint64_t seed);
std::vector<Episode> prior_episodes(const GeneratorHyperSpace& space, std::size_t count,
                                    std::uint64_t seed);

// Mean AUC (classification) and NLL of `model` over raw episodes, through
// the zero-shot prediction path.
EvalRecord evaluate_episodes(const Model& model, const std::vector<Episode>& episodes);

class Trainer {
 public:
  explicit Trainer(TrainConfig config);

  // One optimizer step; returns the step's mean NLL.
  double step();
  // Same as step() with the agent code path compiled out. Only valid when
  // there are no adversarial slots.
  double step_without_agents();

  // Runs evaluation if the cadence calls for it after the latest step.
  void maybe_evaluate();
  void evaluate_now();

  std::size_t steps_done() const { return steps_done_; }
  bool finished() const { return steps_done_ >= config_.total_steps(); }
  const TrainConfig& config() const { return config_; }
  Model& model() { return model_; }
  const Model& model() const { return model_; }
  AgentPool& pool() { return pool_; }
  TrainLog& log() { return log_; }
  Adam& optimizer() { return adam_; }

  // Model weights, optimizer moments, agent weights and clocks.
  Bundle state() const;
  void restore(const Bundle& state);

  // Draws episode `index` of step `step` for an ordinary slot.
  Episode ordinary_episode(std::size_t step, std::size_t index) const;

 private:
  template <bool kAgents>
  double run_step();
  Episode adversarial_episode(std::size_t step, std::size_t index, AgentState& agent);
  std::size_t episode_rows(std::size_t step, std::size_t index) const;
  std::size_t episode_split(std::size_t step, std::size_t index, std::size_t n) const;

  TrainConfig config_;
  Model model_;
  Adam adam_;
  AgentPool pool_;
  TrainLog log_;
  std::size_t steps_done_ = 0;
  std::vector<Episode> eval_episodes_;
};

struct PretrainResult {
  Model model;
  TrainLog log;
};

// Trains until the budget is used. With an output directory: writes
// manifest.json before the first step and again on completion, log.ndjson,
// state.ckpt at every evaluation, and model.ckpt at the end. `resume` points
// at a state.ckpt to continue from.
PretrainResult pretrain(const TrainConfig& config,
                        const std::optional<std::filesystem::path>& resume = std::nullopt);

}  // namespace aptab
