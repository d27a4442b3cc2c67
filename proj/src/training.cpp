#include "aptab/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include <fmt/chrono.h>
#include <fmt/format.h>

#include "aptab/inference.hpp"
#include "aptab/loss.hpp"
#include "aptab/metrics.hpp"
#include "aptab/ops.hpp"
#include "aptab/random.hpp"

namespace aptab {
namespace {

constexpr std::size_t kGenerationAttempts = 8;
constexpr const char* kStateKind = "train-state";

nlohmann::json range_json(IntRange r) { return {r.lo, r.hi}; }
nlohmann::json range_json(RealRange r) { return {r.lo, r.hi}; }
IntRange int_range(const nlohmann::json& j) { return {j.at(0).get<std::size_t>(), j.at(1).get<std::size_t>()}; }
RealRange real_range(const nlohmann::json& j) { return {j.at(0).get<double>(), j.at(1).get<double>()}; }

double nan_value() { return std::numeric_limits<double>::quiet_NaN(); }

std::string utc_now() {
  return fmt::format("{:%Y-%m-%dT%H:%M:%SZ}", fmt::gmtime(std::chrono::system_clock::to_time_t(
                                                  std::chrono::system_clock::now())));
}

std::size_t uniform_size(IntRange r, std::uint64_t seed) {
  Rng rng(seed);
  return std::uniform_int_distribution<std::size_t>(r.lo, r.hi)(rng);
}

bool has_both_classes(const std::vector<int>& labels, std::size_t begin, std::size_t end) {
  bool zero = false;
  bool one = false;
  for (std::size_t i = begin; i < end; ++i) (labels[i] == 0 ? zero : one) = true;
  return zero && one;
}

void copy_into(Tensor& dst, const Tensor& src, const std::string& name) {
  if (dst.shape() != src.shape()) {
    throw std::runtime_error(fmt::format("train state: tensor '{}' has shape {}, expected {}", name,
                                         shape_to_string(src.shape()),
                                         shape_to_string(dst.shape())));
  }
  std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
}

}  // namespace

std::string_view to_string(EvalSuite suite) {
  switch (suite) {
    case EvalSuite::kNone: return "none";
    case EvalSuite::kLinearBoundary: return "linear-boundary";
    case EvalSuite::kPrior: return "prior";
  }
  return "none";
}

EvalSuite parse_eval_suite(std::string_view text) {
  if (text == "none") return EvalSuite::kNone;
  if (text == "linear-boundary") return EvalSuite::kLinearBoundary;
  if (text == "prior") return EvalSuite::kPrior;
  throw std::invalid_argument(fmt::format("unknown evaluation suite '{}'", text));
}

void TrainConfig::validate() const {
  model.validate();
  prior.validate();
  agents.validate();
  if (!(lr >= 0)) throw std::invalid_argument("train: lr must be non-negative");
  if (accumulation == 0) throw std::invalid_argument("train: accumulation must be at least 1");
  if (budget < effective_batch()) {
    throw std::invalid_argument(fmt::format(
        "train: budget {} is smaller than the effective batch {}", budget, effective_batch()));
  }
  if (eval_every > 0 && eval_suite != EvalSuite::kNone && eval_episodes == 0) {
    throw std::invalid_argument("train: evaluation needs at least one episode");
  }
}

nlohmann::json to_json(const GeneratorHyperSpace& s) {
  nlohmann::json activations = nlohmann::json::array();
  for (auto a : s.activations) activations.push_back(std::string(to_string(a)));
  return {{"layers", range_json(s.layers)},
          {"hidden_width", range_json(s.hidden_width)},
          {"inputs", range_json(s.inputs)},
          {"activations", activations},
          {"dropout", range_json(s.dropout)},
          {"noise_std", range_json(s.noise_std)},
          {"weight_scale", range_json(s.weight_scale)},
          {"features", range_json(s.features)},
          {"samples", range_json(s.samples)},
          {"classes", range_json(s.classes)},
          {"categorical_fraction", range_json(s.categorical_fraction)},
          {"cardinality", range_json(s.cardinality)},
          {"regression_probability", s.regression_probability}};
}

GeneratorHyperSpace hyperspace_from_json(const nlohmann::json& j) {
  GeneratorHyperSpace s;
  s.layers = int_range(j.at("layers"));
  s.hidden_width = int_range(j.at("hidden_width"));
  s.inputs = int_range(j.at("inputs"));
  s.activations.clear();
  for (const auto& a : j.at("activations")) s.activations.push_back(parse_activation(a.get<std::string>()));
  s.dropout = real_range(j.at("dropout"));
  s.noise_std = real_range(j.at("noise_std"));
  s.weight_scale = real_range(j.at("weight_scale"));
  s.features = int_range(j.at("features"));
  s.samples = int_range(j.at("samples"));
  s.classes = int_range(j.at("classes"));
  s.categorical_fraction = real_range(j.at("categorical_fraction"));
  s.cardinality = int_range(j.at("cardinality"));
  s.regression_probability = j.at("regression_probability").get<double>();
  return s;
}

nlohmann::json to_json(const AgentConfig& c) {
  return {{"m", c.slots},         {"fraction", c.fraction},       {"lr", c.lr},
          {"weight_decay", c.weight_decay}, {"temperature", c.temperature},
          {"reset_period", c.reset_period}};
}

AgentConfig agent_config_from_json(const nlohmann::json& j) {
  AgentConfig c;
  c.slots = j.at("m").get<std::size_t>();
  c.fraction = j.at("fraction").get<double>();
  c.lr = j.at("lr").get<Real>();
  c.weight_decay = j.at("weight_decay").get<Real>();
  c.temperature = j.at("temperature").get<Real>();
  c.reset_period = j.at("reset_period").get<std::size_t>();
  return c;
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"model", c.model.to_json()},
          {"prior", to_json(c.prior)},
          {"agents", to_json(c.agents)},
          {"lr", c.lr},
          {"accumulation", c.accumulation},
          {"budget", c.budget},
          {"seed", c.seed},
          {"eval_every", c.eval_every},
          {"eval_suite", std::string(to_string(c.eval_suite))},
          {"eval_episodes", c.eval_episodes},
          {"eval_seed", c.eval_seed},
          {"output_dir", c.output_dir.string()}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.model = ModelConfig::from_json(j.at("model"));
  c.prior = hyperspace_from_json(j.at("prior"));
  c.agents = agent_config_from_json(j.at("agents"));
  c.lr = j.at("lr").get<Real>();
  c.accumulation = j.at("accumulation").get<std::size_t>();
  c.budget = j.at("budget").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.eval_every = j.at("eval_every").get<std::size_t>();
  c.eval_suite = parse_eval_suite(j.at("eval_suite").get<std::string>());
  c.eval_episodes = j.at("eval_episodes").get<std::size_t>();
  c.eval_seed = j.at("eval_seed").get<std::uint64_t>();
  c.output_dir = j.at("output_dir").get<std::string>();
  return c;
}

nlohmann::json to_json(const StepRecord& r) {
  nlohmann::json j{{"type", "step"}, {"step", r.step}, {"nll", r.nll},
                   {"ordinary_nll", r.ordinary_nll}, {"skipped", r.skipped}};
  if (std::isfinite(r.adversarial_nll)) j["adversarial_nll"] = r.adversarial_nll;
  return j;
}

nlohmann::json to_json(const EvalRecord& r) {
  nlohmann::json j{{"type", "eval"}, {"step", r.step}, {"nll", r.nll}};
  if (std::isfinite(r.auc)) j["auc"] = r.auc;
  return j;
}

nlohmann::json to_json(const ResetRecord& r) {
  return {{"type", "reset"}, {"step", r.step}, {"slot", r.slot},
          {"reason", std::string(to_string(r.reason))}, {"resets", r.resets}};
}

nlohmann::json to_json(const NanRecord& r) {
  return {{"type", "nan"}, {"step", r.step}, {"what", r.what}, {"slot", r.slot}};
}

void TrainLog::emit(const nlohmann::json& record) {
  if (sink_) *sink_ << record.dump() << '\n';
}

void TrainLog::add(const StepRecord& r) {
  if (!steps.empty() && r.step <= steps.back().step) {
    throw std::logic_error("train log: step indices must increase");
  }
  steps.push_back(r);
  emit(to_json(r));
}

void TrainLog::add(const EvalRecord& r) {
  evals.push_back(r);
  emit(to_json(r));
}

void TrainLog::add(const ResetRecord& r) {
  resets.push_back(r);
  emit(to_json(r));
}

void TrainLog::add(const NanRecord& r) {
  nans.push_back(r);
  emit(to_json(r));
}

void TrainLog::flush() {
  if (sink_) sink_->flush();
}

std::vector<Episode> linear_boundary_episodes(std::size_t count, std::uint64_t seed) {
  constexpr std::size_t n = 200;
  constexpr std::size_t split = 160;
  std::vector<Episode> out;
  out.reserve(count);
  for (std::size_t e = 0; e < count; ++e) {
    Rng rng(derive_seed(seed, {key(Stream::kEvaluation), 100, e}));
    std::normal_distribution<double> normal(0, 1);
    while (true) {
      const double w0 = normal(rng);
      const double w1 = normal(rng);
      const double b = 0.5 * normal(rng);
      std::vector<Real> x(n * 2);
      std::vector<int> labels(n);
      std::vector<Real> y(n);
      for (std::size_t i = 0; i < n; ++i) {
        x[i * 2] = normal(rng);
        x[i * 2 + 1] = normal(rng);
        labels[i] = w0 * x[i * 2] + w1 * x[i * 2 + 1] + b > 0 ? 1 : 0;
        y[i] = labels[i];
      }
      if (!has_both_classes(labels, 0, split) || !has_both_classes(labels, split, n)) continue;
      Episode ep;
      ep.data.x = Tensor({n, 2}, std::move(x));
      ep.data.y = Tensor::vector(std::move(y));
      ep.data.labels = std::move(labels);
      ep.data.categorical = {0, 0};
      ep.data.num_classes = 2;
      ep.split = split;
      out.push_back(std::move(ep));
      break;
    }
  }
  return out;
}

std::vector<Episode> prior_episodes(const GeneratorHyperSpace& space, std::size_t count,
                                    std::uint64_t seed) {
  std::vector<Episode> out;
  out.reserve(count);
  for (std::size_t e = 0; out.size() < count; ++e) {
    if (e > 16 * count + 16) throw std::runtime_error("prior_episodes: generation keeps failing");
    const std::uint64_t base = derive_seed(seed, {key(Stream::kEvaluation), 200, e});
    try {
      const auto g = sample_generator(space, base);
      const std::size_t n = uniform_size(space.samples, derive_seed(base, {key(Stream::kLength)}));
      Rng split_rng(derive_seed(base, {key(Stream::kSplit)}));
      const std::size_t split = sample_split(n, split_rng);
      out.push_back({generate_dataset(g, n, derive_seed(base, {key(Stream::kData)})), split});
    } catch (const std::runtime_error&) {
      continue;
    }
  }
  return out;
}

EvalRecord evaluate_episodes(const Model& model, const std::vector<Episode>& episodes) {
  EvalRecord r;
  double auc_total = 0;
  std::size_t auc_count = 0;
  double nll_total = 0;
  for (const auto& ep : episodes) {
    std::vector<std::size_t> train_rows(ep.split);
    std::iota(train_rows.begin(), train_rows.end(), std::size_t{0});
    std::vector<std::size_t> test_rows(ep.data.rows() - ep.split);
    std::iota(test_rows.begin(), test_rows.end(), ep.split);
    const Dataset data = ep.data.detached();
    const Prediction p = predict(model, data.take_rows(train_rows), data.take_rows(test_rows));
    nll_total += nll(p, Episode{data, ep.split}).item();
    if (data.task == TaskKind::kClassification) {
      const std::span<const int> truth(data.labels.data() + ep.split, test_rows.size());
      std::vector<int> present(truth.begin(), truth.end());
      std::sort(present.begin(), present.end());
      if (std::unique(present.begin(), present.end()) - present.begin() >= 2) {
        auc_total += roc_auc_ovo(p, truth);
        ++auc_count;
      }
    }
  }
  r.nll = nll_total / static_cast<double>(episodes.size());
  r.auc = auc_count ? auc_total / static_cast<double>(auc_count) : nan_value();
  return r;
}

Trainer::Trainer(TrainConfig config)
    : config_((config.validate(), std::move(config))),
      model_(config_.model, config_.seed),
      adam_(model_.parameters(), AdamConfig{config_.lr}),
      pool_(config_.agents, config_.prior, config_.seed) {
  model_.set_requires_grad(true);
  if (config_.eval_every > 0) {
    if (config_.eval_suite == EvalSuite::kLinearBoundary) {
      eval_episodes_ = linear_boundary_episodes(config_.eval_episodes, config_.eval_seed);
    } else if (config_.eval_suite == EvalSuite::kPrior) {
      eval_episodes_ = prior_episodes(config_.prior, config_.eval_episodes, config_.eval_seed);
    }
  }
}

std::size_t Trainer::episode_rows(std::size_t step, std::size_t index) const {
  return uniform_size(config_.prior.samples,
                      derive_seed(config_.seed, {key(Stream::kLength), step, index}));
}

std::size_t Trainer::episode_split(std::size_t step, std::size_t index, std::size_t n) const {
  Rng rng(derive_seed(config_.seed, {key(Stream::kSplit), step, index}));
  return sample_split(n, rng);
}

Episode Trainer::ordinary_episode(std::size_t step, std::size_t index) const {
  const std::size_t n = episode_rows(step, index);
  const std::size_t split = episode_split(step, index, n);
  for (std::size_t attempt = 0; attempt < kGenerationAttempts; ++attempt) {
    const std::uint64_t seed = config_.seed;
    try {
      const auto g = sample_generator(
          config_.prior, derive_seed(seed, {key(Stream::kGenerator), step, index, attempt}));
      return {generate_dataset(g, n, derive_seed(seed, {key(Stream::kData), step, index, attempt})),
              split};
    } catch (const std::runtime_error&) {
    }
  }
  throw std::runtime_error(
      fmt::format("training: no usable generator for step {} episode {}", step, index));
}

Episode Trainer::adversarial_episode(std::size_t step, std::size_t index, AgentState& agent) {
  const std::size_t n = episode_rows(step, index);
  const std::size_t split = episode_split(step, index, n);
  const std::uint64_t data_seed = derive_seed(config_.seed, {key(Stream::kData), step, index});
  for (std::size_t attempt = 0; attempt < kGenerationAttempts; ++attempt) {
    try {
      return {generate_dataset(agent.generator, n, data_seed), split};
    } catch (const std::runtime_error&) {
      reset_agent(agent, pool_.space(), pool_.run_seed());
      log_.add(ResetRecord{step, agent.slot, ResetReason::kGenerationFailure, agent.resets});
    }
  }
  throw std::runtime_error(
      fmt::format("training: agent in slot {} cannot generate data", agent.slot));
}

template <bool kAgents>
double Trainer::run_step() {
  const std::size_t s = steps_done_;
  const std::size_t m = config_.agents.slots;
  const std::size_t episodes = m * config_.accumulation;
  const Real inv = Real{1} / static_cast<Real>(episodes);
  adam_.zero_grad();

  double ordinary_total = 0;
  double adversarial_total = 0;
  std::size_t adversarial_count = 0;
  for (std::size_t micro = 0; micro < config_.accumulation; ++micro) {
    std::vector<Tensor> losses;
    losses.reserve(m);
    for (std::size_t slot = 0; slot < m; ++slot) {
      const std::size_t index = micro * m + slot;
      bool adversarial = false;
      Episode ep;
      if constexpr (kAgents) {
        adversarial = pool_.is_adversarial(slot);
        ep = adversarial ? adversarial_episode(s, index, pool_.for_slot(slot))
                         : ordinary_episode(s, index);
      } else {
        ep = ordinary_episode(s, index);
      }
      const ForwardOptions gates{GateMode::kSample,
                                 derive_seed(config_.seed, {key(Stream::kGates), s, index})};
      Tensor loss = nll(model_.forward(ep, gates), ep);
      (adversarial ? adversarial_total : ordinary_total) += loss.item();
      adversarial_count += adversarial;
      losses.push_back(std::move(loss));
    }
    Tensor total = losses.front();
    for (std::size_t i = 1; i < losses.size(); ++i) total = total + losses[i];
    backward(total * inv, 1, BackwardOptions{.check_finite = false});

    if constexpr (kAgents) {
      // Each agent's gradient carries the 1/episodes factor of the joint
      // loss; undo it so the agent ascends its own episode NLL.
      for (auto& agent : pool_.agents()) {
        if (ascend(agent, static_cast<Real>(episodes))) continue;
        log_.add(NanRecord{s, "agent", agent.slot});
        reset_agent(agent, pool_.space(), pool_.run_seed());
        log_.add(ResetRecord{s, agent.slot, ResetReason::kNanGradient, agent.resets});
      }
    }
  }

  StepRecord record;
  record.step = s;
  const std::size_t ordinary_count = episodes - adversarial_count;
  record.nll = (ordinary_total + adversarial_total) / static_cast<double>(episodes);
  record.ordinary_nll =
      ordinary_count ? ordinary_total / static_cast<double>(ordinary_count) : nan_value();
  record.adversarial_nll = adversarial_count
                               ? adversarial_total / static_cast<double>(adversarial_count)
                               : nan_value();

  const auto params = model_.parameters();
  if (grads_finite(params) && std::isfinite(record.nll)) {
    adam_.step();
  } else {
    record.skipped = true;
    adam_.zero_grad();
    log_.add(NanRecord{s, "model", 0});
  }

  if constexpr (kAgents) {
    for (auto& agent : pool_.agents()) {
      if (maybe_reset(agent, pool_.space(), pool_.run_seed())) {
        log_.add(ResetRecord{s + 1, agent.slot, ResetReason::kPeriod, agent.resets});
      }
    }
  }
  ++steps_done_;
  log_.add(record);
  return record.nll;
}

double Trainer::step() { return run_step<true>(); }

double Trainer::step_without_agents() {
  if (pool_.adversarial_count() > 0) {
    throw std::logic_error("step_without_agents: the pool has adversarial slots");
  }
  return run_step<false>();
}

void Trainer::evaluate_now() {
  if (eval_episodes_.empty()) return;
  EvalRecord r = evaluate_episodes(model_, eval_episodes_);
  r.step = steps_done_;
  log_.add(r);
}

void Trainer::maybe_evaluate() {
  if (config_.eval_every == 0) return;
  if (steps_done_ % config_.eval_every == 0 || finished()) evaluate_now();
}

Bundle Trainer::state() const {
  Bundle b;
  b.kind = kStateKind;
  nlohmann::json agents = nlohmann::json::array();
  for (const auto& a : pool_.agents()) {
    agents.push_back({{"slot", a.slot}, {"resets", a.resets}, {"steps_since_reset", a.steps_since_reset}});
  }
  b.header = {{"step", steps_done_},
              {"adam_steps", adam_.step_count()},
              {"config", to_json(config_)},
              {"agents", agents},
              {"version", APTAB_VERSION}};
  for (const auto& p : model_.named_parameters()) {
    b.tensors.push_back({"model/" + p.name, p.value.detach()});
  }
  auto& adam = const_cast<Adam&>(adam_);
  for (std::size_t i = 0; i < adam.first_moments().size(); ++i) {
    const auto n = adam.first_moments()[i].size();
    b.tensors.push_back({fmt::format("adam.m/{}", i), Tensor({n}, adam.first_moments()[i])});
    b.tensors.push_back({fmt::format("adam.v/{}", i), Tensor({n}, adam.second_moments()[i])});
  }
  for (std::size_t k = 0; k < pool_.agents().size(); ++k) {
    const auto params = pool_.agents()[k].parameters();
    for (std::size_t j = 0; j < params.size(); ++j) {
      b.tensors.push_back({fmt::format("agent{}/{}", k, j), params[j].detach()});
    }
  }
  return b;
}

void Trainer::restore(const Bundle& state) {
  if (state.kind != kStateKind) {
    throw std::runtime_error(fmt::format("expected a training state, found '{}'", state.kind));
  }
  const auto stored = train_config_from_json(state.header.at("config"));
  if (stored.seed != config_.seed || stored.model.to_json() != config_.model.to_json() ||
      to_json(stored.agents) != to_json(config_.agents) ||
      to_json(stored.prior) != to_json(config_.prior)) {
    throw std::runtime_error("training state was written by a different configuration");
  }
  for (auto& p : model_.named_parameters()) {
    Tensor dst = p.value;
    copy_into(dst, state.at("model/" + p.name), p.name);
  }
  auto& m = adam_.first_moments();
  auto& v = adam_.second_moments();
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto& sm = state.at(fmt::format("adam.m/{}", i));
    const auto& sv = state.at(fmt::format("adam.v/{}", i));
    if (sm.numel() != m[i].size() || sv.numel() != v[i].size()) {
      throw std::runtime_error("train state: optimizer moments do not match the model");
    }
    std::copy(sm.data().begin(), sm.data().end(), m[i].begin());
    std::copy(sv.data().begin(), sv.data().end(), v[i].begin());
  }
  adam_.set_step_count(state.header.at("adam_steps").get<std::size_t>());

  const auto& agents = state.header.at("agents");
  if (agents.size() != pool_.agents().size()) {
    throw std::runtime_error("train state: agent count does not match the pool");
  }
  for (std::size_t k = 0; k < agents.size(); ++k) {
    auto& agent = pool_.agents()[k];
    agent.resets = agents[k].at("resets").get<std::size_t>();
    agent.steps_since_reset = agents[k].at("steps_since_reset").get<std::size_t>();
    agent.generator = sample_generator(
        pool_.space(), agent_instance_seed(pool_.run_seed(), agent.slot, agent.resets),
        agent.temperature);
    agent.generator.set_requires_grad(true);
    auto params = agent.parameters();
    for (std::size_t j = 0; j < params.size(); ++j) {
      const auto name = fmt::format("agent{}/{}", k, j);
      copy_into(params[j], state.at(name), name);
    }
  }
  steps_done_ = state.header.at("step").get<std::size_t>();
}

PretrainResult pretrain(const TrainConfig& config,
                        const std::optional<std::filesystem::path>& resume) {
  Trainer trainer(config);
  if (resume) trainer.restore(read_bundle(*resume));

  const auto& dir = config.output_dir;
  std::ofstream log_file;
  nlohmann::json manifest;
  auto write_manifest = [&] {
    std::ofstream out(dir / "manifest.json");
    out << manifest.dump(2) << '\n';
    if (!out) throw std::runtime_error("pretrain: cannot write the manifest");
  };
  if (!dir.empty()) {
    std::filesystem::create_directories(dir);
    log_file.open(dir / "log.ndjson", resume ? std::ios::app : std::ios::trunc);
    if (!log_file) throw std::runtime_error(fmt::format("pretrain: cannot open {}", (dir / "log.ndjson").string()));
    trainer.log().attach(&log_file);
    manifest = {{"config", to_json(config)},
                {"seed", config.seed},
                {"version", APTAB_VERSION},
                {"checkpoint", (dir / "model.ckpt").string()},
                {"state", (dir / "state.ckpt").string()},
                {"total_steps", config.total_steps()},
                {"started", utc_now()},
                {"finished", nullptr}};
    if (resume) manifest["resumed_from"] = resume->string();
    write_manifest();
  }

  if (!resume) trainer.maybe_evaluate();
  try {
    while (!trainer.finished()) {
      trainer.step();
      trainer.maybe_evaluate();
      const bool checkpoint = config.eval_every > 0 &&
                              (trainer.steps_done() % config.eval_every == 0 || trainer.finished());
      if (!dir.empty() && checkpoint) write_bundle(dir / "state.ckpt", trainer.state());
    }
    if (!dir.empty()) {
      trainer.model().save(dir / "model.ckpt");
      manifest["finished"] = utc_now();
      manifest["steps"] = trainer.steps_done();
      write_manifest();
    }
  } catch (...) {
    trainer.log().flush();
    throw;
  }
  trainer.log().flush();
  trainer.log().attach(nullptr);
  return {std::move(trainer.model()), std::move(trainer.log())};
}

}  // namespace aptab
