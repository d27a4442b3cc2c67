#pragma once

// Adversarial data agents: generator instances whose MLP weights are trained
// by gradient ascent on the meta-learner's loss, plus the pool that assigns
// the last round(fraction * m) episode slots of every step to them.

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

#include "aptab/model.hpp"
#include "aptab/prior.hpp"

namespace aptab {

struct AgentConfig {
  std::size_t slots = 64;  // m, episodes per step
  double fraction = 0.125;
  Real lr = 0.1;
  Real weight_decay = 1e-5;
  Real temperature = 0.01;  // soft discretization tau
  std::size_t reset_period = 2000;  // N_e, in gradient steps

  void validate() const;
  std::size_t adversarial_slots() const;
};

struct AgentState {
  GeneratorInstance generator;  // weights and biases require gradients
  Real lr = 0.1;
  Real weight_decay = 1e-5;
  Real temperature = 0.01;
  std::size_t steps_since_reset = 0;
  std::size_t reset_period = 2000;
  std::size_t slot = 0;
  std::size_t resets = 0;

  std::vector<Tensor> parameters() const { return generator.parameters(); }
};

// Seed of the generator instance an agent holds after `resets` resets.
std::uint64_t agent_instance_seed(std::uint64_t run_seed, std::size_t slot, std::size_t resets);

AgentState make_agent(const GeneratorHyperSpace& space, const AgentConfig& config,
                      std::uint64_t run_seed, std::size_t slot);

// Re-samples the instance (and every random factor with it) and zeroes the
// clock.
void reset_agent(AgentState& agent, const GeneratorHyperSpace& space, std::uint64_t run_seed);

// Advances the clock by one step; resets when it reaches the period.
bool maybe_reset(AgentState& agent, const GeneratorHyperSpace& space, std::uint64_t run_seed);

// E log q over the episode's test rows, i.e. minus the meta-learner's NLL.
// Throws std::logic_error when the episode carries no gradient path back to
// the generator.
Tensor agent_loss(const Model& model, const Episode& episode, const ForwardOptions& options = {});

// p <- (p + lr * scale * g)(1 - lr * wd), with g the gradient of the
// meta-learner's NLL; then clears the gradients. Returns false, leaving the
// weights alone, when a gradient is not finite.
bool ascend(AgentState& agent, Real gradient_scale = 1);

enum class ResetReason { kPeriod, kNanGradient, kGenerationFailure };
std::string_view to_string(ResetReason reason);

class AgentPool {
 public:
  AgentPool(const AgentConfig& config, const GeneratorHyperSpace& space, std::uint64_t run_seed);

  const AgentConfig& config() const { return config_; }
  const GeneratorHyperSpace& space() const { return space_; }
  std::uint64_t run_seed() const { return run_seed_; }
  std::size_t slots() const { return config_.slots; }
  std::size_t adversarial_count() const { return agents_.size(); }
  bool is_adversarial(std::size_t slot) const { return slot >= first_adversarial(); }
  std::size_t first_adversarial() const { return config_.slots - agents_.size(); }

  // Agent owning an adversarial slot.
  AgentState& for_slot(std::size_t slot);
  std::vector<AgentState>& agents() { return agents_; }
  const std::vector<AgentState>& agents() const { return agents_; }

  void reset(std::size_t index) { reset_agent(agents_.at(index), space_, run_seed_); }

 private:
  AgentConfig config_;
  GeneratorHyperSpace space_;
  std::uint64_t run_seed_;
  std::vector<AgentState> agents_;
};

// Dataset collections for the diversity diagnostics.
struct CollectionOptions {
  std::size_t count = 2000;
  std::size_t rows = 50;          // per dataset
  std::size_t ascent_steps = 0;  // adversarial warm-up before the first emitted dataset
  std::uint64_t seed = 0;
};

// One fresh ordinary generator per dataset.
std::vector<Dataset> ordinary_collection(const GeneratorHyperSpace& space,
                                         const CollectionOptions& options);

// A pool of config.adversarial_slots() agents (at least one) ascends against a
// frozen copy of `model` without periodic resets. After `ascent_steps` warm-up
// rounds, every round each agent emits the dataset it just ascended on, as in
// pre-training. `failures` counts agents replaced after a generation failure
// or a non-finite gradient.
std::vector<Dataset> adversarial_collection(const Model& model, const GeneratorHyperSpace& space,
                                            const AgentConfig& config,
                                            const CollectionOptions& options,
                                            std::size_t* failures = nullptr);

}  // namespace aptab
