#include "aptab/agents.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

#include "aptab/loss.hpp"
#include "aptab/ops.hpp"
#include "aptab/optim.hpp"
#include "aptab/random.hpp"

namespace aptab {

void AgentConfig::validate() const {
  if (slots == 0) throw std::invalid_argument("agents: m must be at least 1");
  if (!(fraction >= 0 && fraction <= 1)) {
    throw std::invalid_argument(fmt::format("agents: fraction {} outside [0, 1]", fraction));
  }
  if (lr < 0 || weight_decay < 0) throw std::invalid_argument("agents: negative lr or weight decay");
  if (reset_period == 0) throw std::invalid_argument("agents: reset period must be at least 1");
  if (adversarial_slots() > 0 && !(temperature > 0)) {
    throw std::invalid_argument("agents: adversarial agents need a positive temperature");
  }
}

std::size_t AgentConfig::adversarial_slots() const {
  return static_cast<std::size_t>(std::lround(fraction * static_cast<double>(slots)));
}

std::uint64_t agent_instance_seed(std::uint64_t run_seed, std::size_t slot, std::size_t resets) {
  return derive_seed(run_seed, {key(Stream::kAgentSlot), slot, resets});
}

AgentState make_agent(const GeneratorHyperSpace& space, const AgentConfig& config,
                      std::uint64_t run_seed, std::size_t slot) {
  AgentState agent;
  agent.lr = config.lr;
  agent.weight_decay = config.weight_decay;
  agent.temperature = config.temperature;
  agent.reset_period = config.reset_period;
  agent.slot = slot;
  agent.generator =
      sample_generator(space, agent_instance_seed(run_seed, slot, 0), config.temperature);
  agent.generator.set_requires_grad(true);
  return agent;
}

void reset_agent(AgentState& agent, const GeneratorHyperSpace& space, std::uint64_t run_seed) {
  ++agent.resets;
  agent.generator = sample_generator(space, agent_instance_seed(run_seed, agent.slot, agent.resets),
                                     agent.temperature);
  agent.generator.set_requires_grad(true);
  agent.steps_since_reset = 0;
}

bool maybe_reset(AgentState& agent, const GeneratorHyperSpace& space, std::uint64_t run_seed) {
  if (++agent.steps_since_reset < agent.reset_period) return false;
  reset_agent(agent, space, run_seed);
  return true;
}

Tensor agent_loss(const Model& model, const Episode& episode, const ForwardOptions& options) {
  const bool connected = episode.data.task == TaskKind::kClassification
                             ? episode.data.y.requires_grad()
                             : episode.data.y.requires_grad() || episode.data.x.requires_grad();
  if (!connected) {
    throw std::logic_error("agent_loss: episode has no gradient path to the generator");
  }
  return neg(nll(model.forward(episode, options), episode));
}

bool ascend(AgentState& agent, Real gradient_scale) {
  auto params = agent.parameters();
  for (auto& p : params) {
    if (!p.has_grad()) p.zero_grad();
  }
  if (!grads_finite(params)) {
    zero_grads(params);
    return false;
  }
  if (gradient_scale != 1) {
    for (auto& p : params) {
      for (auto& g : p.mutable_grad()) g *= gradient_scale;
    }
  }
  ascend_step(params, agent.lr, agent.weight_decay);
  zero_grads(params);
  return true;
}

std::string_view to_string(ResetReason reason) {
  switch (reason) {
    case ResetReason::kPeriod: return "period";
    case ResetReason::kNanGradient: return "nan-gradient";
    case ResetReason::kGenerationFailure: return "generation-failure";
  }
  return "unknown";
}

AgentPool::AgentPool(const AgentConfig& config, const GeneratorHyperSpace& space,
                     std::uint64_t run_seed)
    : config_(config), space_(space), run_seed_(run_seed) {
  config_.validate();
  space_.validate();
  const std::size_t count = config_.adversarial_slots();
  agents_.reserve(count);
  for (std::size_t slot = config_.slots - count; slot < config_.slots; ++slot) {
    agents_.push_back(make_agent(space_, config_, run_seed_, slot));
  }
}

AgentState& AgentPool::for_slot(std::size_t slot) {
  if (!is_adversarial(slot) || slot >= config_.slots) {
    throw std::out_of_range(fmt::format("agent pool: slot {} is not adversarial", slot));
  }
  return agents_[slot - first_adversarial()];
}

std::vector<Dataset> ordinary_collection(const GeneratorHyperSpace& space,
                                         const CollectionOptions& options) {
  std::vector<Dataset> out;
  out.reserve(options.count);
  for (std::size_t i = 0; out.size() < options.count; ++i) {
    if (i > 16 * options.count + 16) {
      throw std::runtime_error("ordinary_collection: generation keeps failing");
    }
    try {
      const auto g =
          sample_generator(space, derive_seed(options.seed, {key(Stream::kGenerator), i}));
      out.push_back(
          generate_dataset(g, options.rows, derive_seed(options.seed, {key(Stream::kData), i})));
    } catch (const std::runtime_error&) {
    }
  }
  return out;
}

std::vector<Dataset> adversarial_collection(const Model& model, const GeneratorHyperSpace& space,
                                            const AgentConfig& config,
                                            const CollectionOptions& options,
                                            std::size_t* failures) {
  Model frozen = model.clone();
  frozen.set_requires_grad(false);
  const std::size_t pool = std::max<std::size_t>(1, config.adversarial_slots());
  std::vector<AgentState> agents;
  for (std::size_t slot = 0; slot < pool; ++slot) {
    agents.push_back(make_agent(space, config, options.seed, slot));
  }
  std::size_t replaced = 0;
  std::vector<Dataset> out;
  out.reserve(options.count);
  for (std::size_t round = 0; out.size() < options.count; ++round) {
    for (std::size_t slot = 0; slot < pool && out.size() < options.count; ++slot) {
      AgentState& agent = agents[slot];
      const std::uint64_t seed = derive_seed(options.seed, {key(Stream::kData), slot, round});
      Dataset data;
      for (std::size_t attempt = 0;; ++attempt) {
        try {
          data = generate_dataset(agent.generator, options.rows, seed);
          break;
        } catch (const std::runtime_error&) {
          if (attempt >= 16) throw;
          reset_agent(agent, space, options.seed);
          ++replaced;
        }
      }
      Rng split_rng(derive_seed(options.seed, {key(Stream::kSplit), slot, round}));
      Episode e{std::move(data), sample_split(options.rows, split_rng)};
      const ForwardOptions gates{GateMode::kSample,
                                 derive_seed(options.seed, {key(Stream::kGates), slot, round})};
      backward(nll(frozen.forward(e, gates), e), 1, BackwardOptions{.check_finite = false});
      if (!ascend(agent)) {
        reset_agent(agent, space, options.seed);
        ++replaced;
      }
      if (round >= options.ascent_steps) out.push_back(e.data.detached());
    }
  }
  if (failures) *failures = replaced;
  return out;
}

}  // namespace aptab
