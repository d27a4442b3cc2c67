#include "aptab/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include <fmt/format.h>

#include "aptab/ops.hpp"
#include "aptab/random.hpp"

namespace aptab {
namespace {

constexpr std::string_view kBundleKind = "model";
constexpr Real kGateBiasInit = 0.5;

class ParamBuilder {
 public:
  explicit ParamBuilder(std::uint64_t seed) : rng_(seed) {}

  void linear(const std::string& prefix, std::size_t in, std::size_t out, bool bias = true) {
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(in)));
    std::vector<Real> w(in * out);
    for (auto& v : w) v = static_cast<Real>(dist(rng_));
    add(prefix + ".w", Tensor({in, out}, std::move(w)));
    if (bias) add(prefix + ".b", Tensor::zeros({out}));
  }

  void layer_norm(const std::string& prefix, std::size_t width) {
    add(prefix + ".g", Tensor::full({width}, 1));
    add(prefix + ".b", Tensor::zeros({width}));
  }

  void add(std::string name, Tensor value) { params_.push_back({std::move(name), std::move(value)}); }

  std::vector<NamedTensor> take() { return std::move(params_); }

 private:
  Rng rng_;
  std::vector<NamedTensor> params_;
};

std::vector<NamedTensor> initial_parameters(const ModelConfig& c, std::uint64_t seed) {
  ParamBuilder b(derive_seed(seed, {key(Stream::kModelInit)}));
  const std::size_t d = c.d_model;
  b.linear("feature", c.feature_width, d);
  if (c.embedding == EmbeddingKind::kPatch) {
    for (const char* p : {"patch.q", "patch.k", "patch.v", "patch.o"}) b.linear(p, d, d);
    b.layer_norm("patch.ln", d);
  }
  b.linear("label", 1, d);
  for (std::size_t i = 0; i < c.blocks; ++i) {
    const std::string block = fmt::format("block{}", i);
    for (const char* p : {".attn.q", ".attn.k", ".attn.v", ".attn.o"}) b.linear(block + p, d, d);
    b.layer_norm(block + ".ln1", d);
    b.linear(block + ".ff1", d, c.ff_width);
    b.linear(block + ".ff2", c.ff_width, d);
    b.layer_norm(block + ".ln2", d);
  }
  if (c.head == HeadKind::kMixture) {
    for (const char* p : {"mixture.weight_q", "mixture.weight_k", "mixture.gate_q", "mixture.gate_k"}) {
      b.linear(p, d, d, false);
    }
    b.add("mixture.gate_bias", Tensor::scalar(kGateBiasInit));
  } else {
    b.linear("dense", d, c.max_classes);
  }
  b.linear("gaussian", d, 2);
  return b.take();
}

// Column `col` of a [m, k] tensor as [m].
Tensor column(const Tensor& x, std::size_t col) {
  const std::size_t m = x.dim(0);
  const std::size_t k = x.dim(1);
  std::vector<std::size_t> idx(m);
  for (std::size_t i = 0; i < m; ++i) idx[i] = i * k + col;
  return gather(x, idx, {m});
}

}  // namespace

std::string_view to_string(EmbeddingKind kind) {
  return kind == EmbeddingKind::kDense ? "dense" : "patch";
}

std::string_view to_string(HeadKind kind) { return kind == HeadKind::kMixture ? "mixture" : "dense"; }

EmbeddingKind parse_embedding_kind(std::string_view text) {
  if (text == "dense") return EmbeddingKind::kDense;
  if (text == "patch") return EmbeddingKind::kPatch;
  throw std::invalid_argument(fmt::format("unknown embedding kind '{}'", text));
}

HeadKind parse_head_kind(std::string_view text) {
  if (text == "mixture") return HeadKind::kMixture;
  if (text == "dense") return HeadKind::kDense;
  throw std::invalid_argument(fmt::format("unknown head kind '{}'", text));
}

void ModelConfig::validate() const {
  auto require = [](bool ok, std::string_view what) {
    if (!ok) throw std::invalid_argument(fmt::format("ModelConfig: {}", what));
  };
  require(d_model >= 1, "d_model must be positive");
  require(heads >= 1 && d_model % heads == 0, "d_model must be divisible by heads");
  require(blocks >= 1, "need at least one block");
  require(ff_width >= 1, "ff_width must be positive");
  require(feature_width >= 1, "feature_width must be at least 1");
  require(gate_temperature > 0, "gate_temperature must be positive");
  require(max_classes >= 2, "max_classes must be at least 2");
  require(layer_norm_eps > 0, "layer_norm_eps must be positive");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"d_model", d_model},
          {"blocks", blocks},
          {"heads", heads},
          {"ff_width", ff_width},
          {"feature_width", feature_width},
          {"embedding", std::string(to_string(embedding))},
          {"head", std::string(to_string(head))},
          {"gate_temperature", gate_temperature},
          {"max_classes", max_classes},
          {"layer_norm_eps", layer_norm_eps}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model").get<std::size_t>();
  c.blocks = j.at("blocks").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.ff_width = j.at("ff_width").get<std::size_t>();
  c.feature_width = j.at("feature_width").get<std::size_t>();
  c.embedding = parse_embedding_kind(j.at("embedding").get<std::string>());
  c.head = parse_head_kind(j.at("head").get<std::string>());
  c.gate_temperature = j.at("gate_temperature").get<Real>();
  c.max_classes = j.at("max_classes").get<std::size_t>();
  c.layer_norm_eps = j.at("layer_norm_eps").get<Real>();
  c.validate();
  return c;
}

std::ptrdiff_t Prediction::column_of(int label) const {
  const auto it = std::lower_bound(classes.begin(), classes.end(), label);
  if (it == classes.end() || *it != label) return -1;
  return it - classes.begin();
}

Model::Model(ModelConfig config, std::uint64_t seed)
    : Model(config, seed, (config.validate(), initial_parameters(config, seed))) {}

Model::Model(ModelConfig config, std::uint64_t seed, std::vector<NamedTensor> params)
    : config_(config), seed_(seed), params_(std::move(params)) {
  for (std::size_t i = 0; i < params_.size(); ++i) index_.emplace(params_[i].name, i);
}

Model Model::clone() const {
  std::vector<NamedTensor> copy;
  copy.reserve(params_.size());
  for (const auto& p : params_) copy.push_back({p.name, p.value.clone()});
  return Model(config_, seed_, std::move(copy));
}

std::vector<Tensor> Model::parameters() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.value);
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t total = 0;
  for (const auto& p : params_) total += p.value.numel();
  return total;
}

std::uint64_t Model::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params_) {
    for (Real v : p.value.data()) {
      unsigned char bytes[sizeof(Real)];
      std::memcpy(bytes, &v, sizeof v);
      for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
      }
    }
  }
  return h;
}

void Model::set_requires_grad(bool flag) {
  for (auto& p : params_) p.value.set_requires_grad(flag);
}

const Tensor& Model::param(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw std::logic_error(fmt::format("model has no parameter '{}'", name));
  return params_[it->second].value;
}

Tensor Model::linear(const Tensor& x, const std::string& prefix) const {
  Tensor y = matmul(x, param(prefix + ".w"));
  const auto it = index_.find(prefix + ".b");
  return it == index_.end() ? y : add(y, params_[it->second].value);
}

Tensor Model::attention(const Tensor& x, std::size_t split, const std::string& prefix) const {
  const std::size_t n = x.dim(0);
  const std::size_t d = config_.d_model;
  const std::size_t h = config_.heads;
  const std::size_t dh = d / h;
  const Tensor context = split == n ? x : slice(x, 0, 0, split);
  auto heads_first = [&](const Tensor& t, std::size_t rows) {
    return swap_leading(reshape(t, {rows, h, dh}));  // [h, rows, dh]
  };
  const Tensor q = heads_first(linear(x, prefix + ".q"), n);
  const Tensor k = heads_first(linear(context, prefix + ".k"), split);
  const Tensor v = heads_first(linear(context, prefix + ".v"), split);
  const Tensor scores = scale(matmul(q, transpose(k)), 1 / std::sqrt(static_cast<Real>(dh)));
  const Tensor mixed = matmul(softmax(scores), v);  // [h, n, dh]
  return linear(reshape(swap_leading(mixed), {n, d}), prefix + ".o");
}

Tensor Model::embed_features(const Tensor& x) const {
  if (x.rank() != 2 || x.dim(1) == 0) throw ShapeError("embed", "need at least one feature column");
  if (config_.embedding == EmbeddingKind::kPatch) return patch_embed(x);
  return linear(pad_last(x, config_.feature_width), "feature");
}

Tensor Model::patch_embed(const Tensor& x) const {
  if (x.rank() != 2 || x.dim(1) == 0) throw ShapeError("patch_embed", "need at least one feature");
  const std::size_t n = x.dim(0);
  const std::size_t w = config_.feature_width;
  const std::size_t patches = (x.dim(1) + w - 1) / w;
  const std::size_t d = config_.d_model;
  const Tensor t = linear(reshape(pad_last(x, patches * w), {n, patches, w}), "feature");
  const Tensor q = linear(t, "patch.q");
  const Tensor k = linear(t, "patch.k");
  const Tensor v = linear(t, "patch.v");
  const Tensor scores = scale(matmul(q, transpose(k)), 1 / std::sqrt(static_cast<Real>(d)));
  const Tensor attended = linear(matmul(softmax(scores), v), "patch.o");
  const Tensor normed = add(mul(layer_norm(add(t, attended), config_.layer_norm_eps),
                                param("patch.ln.g")),
                            param("patch.ln.b"));
  return mean(normed, 1);
}

Tensor Model::embed(const Tensor& x, const Tensor& y_train, std::size_t split) const {
  const std::size_t n = x.dim(0);
  if (split == 0 || split > n) throw ShapeError("embed", "split must lie in [1, n]");
  if (y_train.numel() != split) throw ShapeError("embed", y_train.shape(), Shape{split});
  const Tensor features = embed_features(x);
  Tensor labels = linear(reshape(y_train, {split, 1}), "label");
  if (split < n) {
    const std::vector<Tensor> parts{labels, Tensor::zeros({n - split, config_.d_model})};
    labels = concat(parts, 0);
  }
  return add(features, labels);
}

Tensor Model::encode(const Tensor& tokens, std::size_t split) const {
  if (split == 0) throw ShapeError("masked_transformer", "empty training partition");
  const Real eps = config_.layer_norm_eps;
  Tensor h = tokens;
  for (std::size_t i = 0; i < config_.blocks; ++i) {
    const std::string block = fmt::format("block{}", i);
    auto norm = [&](const Tensor& t, const char* ln) {
      return add(mul(layer_norm(t, eps), param(block + ln + ".g")), param(block + ln + ".b"));
    };
    h = norm(add(h, attention(h, split, block + ".attn")), ".ln1");
    const Tensor ff = linear(gelu(linear(h, block + ".ff1")), block + ".ff2");
    h = norm(add(h, ff), ".ln2");
  }
  return h;
}

Prediction Model::mixture_block(const Tensor& test, const Tensor& train,
                                std::span<const int> labels, const ForwardOptions& options) const {
  const std::size_t m = test.dim(0);
  const std::size_t l = train.dim(0);
  if (l == 0) throw ShapeError("mixture_block", "empty training partition");
  if (labels.size() != l) throw ShapeError("mixture_block", "one label per training row");
  Prediction pred;
  pred.task = TaskKind::kClassification;
  pred.classes.assign(labels.begin(), labels.end());
  std::sort(pred.classes.begin(), pred.classes.end());
  pred.classes.erase(std::unique(pred.classes.begin(), pred.classes.end()), pred.classes.end());
  if (pred.classes.front() < 0) throw std::invalid_argument("mixture_block: unknown training label");
  const std::size_t c = pred.classes.size();

  const Real inv_sqrt_d = 1 / std::sqrt(static_cast<Real>(config_.d_model));
  auto pair_logits = [&](const char* q, const char* k) {
    return scale(matmul(linear(test, q), transpose(linear(train, k))), inv_sqrt_d);  // [m, l]
  };
  const Tensor weights = softmax(pair_logits("mixture.weight_q", "mixture.weight_k"));

  Tensor gates;
  if (options.gates != GateMode::kOpen) {
    Tensor gate_logits = add(pair_logits("mixture.gate_q", "mixture.gate_k"),
                             param("mixture.gate_bias"));
    if (options.gates == GateMode::kSample) {
      Rng rng(options.gate_seed);
      std::uniform_real_distribution<double> uniform(0.0, 1.0);
      std::vector<Real> noise(m * l);
      for (auto& e : noise) {
        double u = uniform(rng);
        while (u <= 0.0) u = uniform(rng);
        e = static_cast<Real>(std::log(u) - std::log1p(-u));
      }
      gate_logits = add(gate_logits, Tensor({m, l}, std::move(noise)));
    }
    gates = sigmoid(scale(gate_logits, 1 / config_.gate_temperature));
  }

  Tensor gated = gates.defined() ? mul(weights, gates) : weights;
  if (gates.defined()) {
    // Rows whose gates all closed fall back to the ungated weights.
    std::vector<Real> keep(m, 1);
    std::vector<Real> fallback(m * l, 0);
    for (std::size_t i = 0; i < m; ++i) {
      Real mass = 0;
      for (std::size_t j = 0; j < l; ++j) mass += gated[i * l + j];
      if (mass < kGatedMassFloor) {
        keep[i] = 0;
        std::fill_n(fallback.begin() + static_cast<std::ptrdiff_t>(i * l), l, Real{1});
        ++pred.fallback_rows;
      }
    }
    if (pred.fallback_rows > 0) {
      const Tensor effective = add(scale_rows(gates, Tensor::vector(keep)),
                                   Tensor({m, l}, std::move(fallback)));
      gated = mul(weights, effective);
    }
  }

  std::vector<std::size_t> index(m * l);
  for (std::size_t j = 0; j < l; ++j) {
    const auto col = static_cast<std::size_t>(pred.column_of(labels[j]));
    for (std::size_t i = 0; i < m; ++i) index[i * l + j] = i * c + col;
  }
  const Tensor mass = scatter_add(gated, index, {m, c});
  const Tensor total = sum(mass, 1);
  pred.probs = scale_rows(mass, div(Tensor::full({m}, 1), total));
  return pred;
}

Prediction Model::dense_head(const Tensor& test, std::size_t classes) const {
  if (config_.head != HeadKind::kDense) throw std::logic_error("model has no dense head");
  if (classes > config_.max_classes) {
    throw std::invalid_argument(fmt::format(
        "dense_head: episode has {} classes but the head supports at most {}", classes,
        config_.max_classes));
  }
  if (classes < 1) throw std::invalid_argument("dense_head: need at least one class");
  Prediction pred;
  pred.task = TaskKind::kClassification;
  for (std::size_t k = 0; k < classes; ++k) pred.classes.push_back(static_cast<int>(k));
  pred.probs = softmax(slice(linear(test, "dense"), 1, 0, classes));
  return pred;
}

Prediction Model::gaussian_head(const Tensor& test) const {
  const Tensor raw = linear(test, "gaussian");
  Prediction pred;
  pred.task = TaskKind::kRegression;
  pred.mean = column(raw, 0);
  pred.stddev = add_scalar(softplus(column(raw, 1)), kSigmaFloor);
  return pred;
}

Prediction Model::forward(const Episode& episode, const ForwardOptions& options) const {
  const Dataset& d = episode.data;
  const std::size_t n = d.rows();
  const std::size_t l = episode.split;
  if (l == 0) throw std::invalid_argument("forward: zero training rows");
  if (l >= n) throw std::invalid_argument("forward: no test rows");
  const Tensor tokens = embed(d.x, slice(d.y, 0, 0, l), l);
  const Tensor h = encode(tokens, l);
  const Tensor train = slice(h, 0, 0, l);
  const Tensor test = slice(h, 0, l, n);
  if (d.task == TaskKind::kRegression) return gaussian_head(test);
  if (config_.head == HeadKind::kDense) return dense_head(test, d.num_classes);
  return mixture_block(test, train, std::span<const int>(d.labels).first(l), options);
}

Bundle Model::to_bundle() const {
  Bundle b;
  b.kind = std::string(kBundleKind);
  b.header = {{"config", config_.to_json()}, {"seed", seed_}, {"version", APTAB_VERSION}};
  for (const auto& p : params_) b.tensors.push_back({p.name, p.value.detach()});
  return b;
}

Model Model::from_bundle(const Bundle& bundle) {
  if (bundle.kind != kBundleKind) {
    throw std::runtime_error(fmt::format("expected a model checkpoint, found '{}'", bundle.kind));
  }
  const auto config = ModelConfig::from_json(bundle.header.at("config"));
  const auto seed = bundle.header.at("seed").get<std::uint64_t>();
  auto params = initial_parameters(config, seed);
  if (params.size() != bundle.tensors.size()) {
    throw std::runtime_error("checkpoint parameter count does not match its config");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& stored = bundle.tensors[i];
    if (stored.name != params[i].name || stored.value.shape() != params[i].value.shape()) {
      throw std::runtime_error(fmt::format("checkpoint parameter '{}' does not match '{}'",
                                           stored.name, params[i].name));
    }
    params[i].value = stored.value.detach();
  }
  return Model(config, seed, std::move(params));
}

void Model::save(const std::filesystem::path& path) const { write_bundle(path, to_bundle()); }

Model Model::load(const std::filesystem::path& path) { return from_bundle(read_bundle(path)); }

}  // namespace aptab
