#include "aptab/config.hpp"

#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>

#include <boost/algorithm/string.hpp>
#include <boost/lexical_cast.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>

#include "aptab/io.hpp"

namespace aptab {
namespace {

namespace pt = boost::property_tree;

const std::map<std::string, std::set<std::string>>& known_keys() {
  static const std::map<std::string, std::set<std::string>> keys{
      {"train", {"lr", "accumulation", "budget", "seed", "output_dir"}},
      {"model",
       {"d_model", "blocks", "heads", "ff_width", "feature_width", "embedding", "head",
        "gate_temperature", "max_classes", "layer_norm_eps"}},
      {"prior",
       {"layers", "hidden_width", "inputs", "activations", "dropout", "noise_std", "weight_scale",
        "features", "samples", "classes", "categorical_fraction", "cardinality",
        "regression_probability"}},
      {"agents", {"m", "fraction", "lr", "weight_decay", "temperature", "reset_period"}},
      {"eval", {"every", "suite", "episodes", "seed"}},
  };
  return keys;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> parts;
  boost::split(parts, text, boost::is_any_of(","));
  for (auto& p : parts) boost::trim(p);
  return parts;
}

template <typename T>
T parse_value(const std::string& where, const std::string& text) {
  try {
    return boost::lexical_cast<T>(boost::trim_copy(text));
  } catch (const boost::bad_lexical_cast&) {
    throw std::invalid_argument(fmt::format("config: cannot parse {} = '{}'", where, text));
  }
}

class Reader {
 public:
  explicit Reader(const pt::ptree& tree) : tree_(tree) {}

  template <typename T>
  void scalar(const std::string& path, T& out) const {
    if (auto v = tree_.get_optional<std::string>(path)) out = parse_value<T>(path, *v);
  }

  template <typename Range, typename T>
  void range(const std::string& path, Range& out) const {
    auto v = tree_.get_optional<std::string>(path);
    if (!v) return;
    const auto parts = split_list(*v);
    if (parts.size() == 1) {
      out.lo = out.hi = parse_value<T>(path, parts[0]);
    } else if (parts.size() == 2) {
      out.lo = parse_value<T>(path, parts[0]);
      out.hi = parse_value<T>(path, parts[1]);
    } else {
      throw std::invalid_argument(fmt::format("config: {} needs 'lo, hi'", path));
    }
  }

  std::optional<std::string> text(const std::string& path) const {
    if (auto v = tree_.get_optional<std::string>(path)) return boost::trim_copy(*v);
    return std::nullopt;
  }

 private:
  const pt::ptree& tree_;
};

std::string range_text(IntRange r) { return fmt::format("{}, {}", r.lo, r.hi); }
std::string range_text(RealRange r) {
  return fmt::format("{}, {}", format_real(r.lo), format_real(r.hi));
}

}  // namespace

TrainConfig parse_train_config(std::istream& in) {
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw std::invalid_argument(fmt::format("config: {}", e.message()));
  }
  for (const auto& [section, body] : tree) {
    const auto known = known_keys().find(section);
    if (known == known_keys().end()) {
      throw std::invalid_argument(fmt::format("config: unknown section [{}]", section));
    }
    for (const auto& [name, value] : body) {
      if (!known->second.count(name)) {
        throw std::invalid_argument(fmt::format("config: unknown key '{}' in [{}]", name, section));
      }
    }
  }

  const Reader r(tree);
  TrainConfig c;
  r.scalar("train.lr", c.lr);
  r.scalar("train.accumulation", c.accumulation);
  r.scalar("train.budget", c.budget);
  r.scalar("train.seed", c.seed);
  if (auto v = r.text("train.output_dir")) c.output_dir = *v;

  auto& m = c.model;
  r.scalar("model.d_model", m.d_model);
  r.scalar("model.blocks", m.blocks);
  r.scalar("model.heads", m.heads);
  r.scalar("model.ff_width", m.ff_width);
  r.scalar("model.feature_width", m.feature_width);
  if (auto v = r.text("model.embedding")) m.embedding = parse_embedding_kind(*v);
  if (auto v = r.text("model.head")) m.head = parse_head_kind(*v);
  r.scalar("model.gate_temperature", m.gate_temperature);
  r.scalar("model.max_classes", m.max_classes);
  r.scalar("model.layer_norm_eps", m.layer_norm_eps);

  auto& p = c.prior;
  r.range<IntRange, std::size_t>("prior.layers", p.layers);
  r.range<IntRange, std::size_t>("prior.hidden_width", p.hidden_width);
  r.range<IntRange, std::size_t>("prior.inputs", p.inputs);
  if (auto v = r.text("prior.activations")) {
    p.activations.clear();
    for (const auto& name : split_list(*v)) p.activations.push_back(parse_activation(name));
  }
  r.range<RealRange, double>("prior.dropout", p.dropout);
  r.range<RealRange, double>("prior.noise_std", p.noise_std);
  r.range<RealRange, double>("prior.weight_scale", p.weight_scale);
  r.range<IntRange, std::size_t>("prior.features", p.features);
  r.range<IntRange, std::size_t>("prior.samples", p.samples);
  r.range<IntRange, std::size_t>("prior.classes", p.classes);
  r.range<RealRange, double>("prior.categorical_fraction", p.categorical_fraction);
  r.range<IntRange, std::size_t>("prior.cardinality", p.cardinality);
  r.scalar("prior.regression_probability", p.regression_probability);

  auto& a = c.agents;
  r.scalar("agents.m", a.slots);
  r.scalar("agents.fraction", a.fraction);
  r.scalar("agents.lr", a.lr);
  r.scalar("agents.weight_decay", a.weight_decay);
  r.scalar("agents.temperature", a.temperature);
  r.scalar("agents.reset_period", a.reset_period);

  r.scalar("eval.every", c.eval_every);
  if (auto v = r.text("eval.suite")) c.eval_suite = parse_eval_suite(*v);
  r.scalar("eval.episodes", c.eval_episodes);
  r.scalar("eval.seed", c.eval_seed);

  c.validate();
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(fmt::format("cannot open config {}", path.string()));
  return parse_train_config(in);
}

std::string to_ini(const TrainConfig& c) {
  std::ostringstream out;
  out << "[train]\n"
      << "lr = " << format_real(c.lr) << '\n'
      << "accumulation = " << c.accumulation << '\n'
      << "budget = " << c.budget << '\n'
      << "seed = " << c.seed << '\n';
  if (!c.output_dir.empty()) out << "output_dir = " << c.output_dir.string() << '\n';
  const auto& m = c.model;
  out << "\n[model]\n"
      << "d_model = " << m.d_model << '\n'
      << "blocks = " << m.blocks << '\n'
      << "heads = " << m.heads << '\n'
      << "ff_width = " << m.ff_width << '\n'
      << "feature_width = " << m.feature_width << '\n'
      << "embedding = " << to_string(m.embedding) << '\n'
      << "head = " << to_string(m.head) << '\n'
      << "gate_temperature = " << format_real(m.gate_temperature) << '\n'
      << "max_classes = " << m.max_classes << '\n'
      << "layer_norm_eps = " << format_real(m.layer_norm_eps) << '\n';
  const auto& p = c.prior;
  std::vector<std::string> activations;
  for (auto act : p.activations) activations.emplace_back(to_string(act));
  out << "\n[prior]\n"
      << "layers = " << range_text(p.layers) << '\n'
      << "hidden_width = " << range_text(p.hidden_width) << '\n'
      << "inputs = " << range_text(p.inputs) << '\n'
      << "activations = " << boost::join(activations, ", ") << '\n'
      << "dropout = " << range_text(p.dropout) << '\n'
      << "noise_std = " << range_text(p.noise_std) << '\n'
      << "weight_scale = " << range_text(p.weight_scale) << '\n'
      << "features = " << range_text(p.features) << '\n'
      << "samples = " << range_text(p.samples) << '\n'
      << "classes = " << range_text(p.classes) << '\n'
      << "categorical_fraction = " << range_text(p.categorical_fraction) << '\n'
      << "cardinality = " << range_text(p.cardinality) << '\n'
      << "regression_probability = " << format_real(p.regression_probability) << '\n';
  const auto& a = c.agents;
  out << "\n[agents]\n"
      << "m = " << a.slots << '\n'
      << "fraction = " << format_real(a.fraction) << '\n'
      << "lr = " << format_real(a.lr) << '\n'
      << "weight_decay = " << format_real(a.weight_decay) << '\n'
      << "temperature = " << format_real(a.temperature) << '\n'
      << "reset_period = " << a.reset_period << '\n';
  out << "\n[eval]\n"
      << "every = " << c.eval_every << '\n'
      << "suite = " << to_string(c.eval_suite) << '\n'
      << "episodes = " << c.eval_episodes << '\n'
      << "seed = " << c.eval_seed << '\n';
  return out.str();
}

}  // namespace aptab
