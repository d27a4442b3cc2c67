#include "aptab/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

#include <fmt/format.h>

namespace aptab {
namespace {

constexpr char kMagic[4] = {'A', 'P', 'T', 'B'};

[[noreturn]] void fail(const std::filesystem::path& path, std::string_view what) {
  throw std::runtime_error(fmt::format("{}: {}", path.string(), what));
}

}  // namespace

const Tensor& Bundle::at(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t.value;
  }
  throw std::runtime_error(fmt::format("bundle '{}' has no tensor '{}'", kind, name));
}

void write_bundle(const std::filesystem::path& path, const Bundle& bundle) {
  nlohmann::json header = {{"kind", bundle.kind}, {"meta", bundle.header}};
  auto& entries = header["tensors"] = nlohmann::json::array();
  for (const auto& t : bundle.tensors) {
    entries.push_back({{"name", t.name}, {"shape", t.value.shape()}});
  }
  const std::string text = header.dump();
  const auto size = static_cast<std::uint64_t>(text.size());

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(tmp, "cannot open for writing");
    out.write(kMagic, sizeof kMagic);
    out.write(reinterpret_cast<const char*>(&kBundleVersion), sizeof kBundleVersion);
    out.write(reinterpret_cast<const char*>(&size), sizeof size);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    std::vector<double> buffer;
    for (const auto& t : bundle.tensors) {
      const auto data = t.value.data();
      buffer.assign(data.begin(), data.end());
      out.write(reinterpret_cast<const char*>(buffer.data()),
                static_cast<std::streamsize>(buffer.size() * sizeof(double)));
    }
    out.flush();
    if (!out) fail(tmp, "write failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(path, ec.message());
}

Bundle read_bundle(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(path, "cannot open for reading");
  char magic[4];
  std::uint32_t version = 0;
  std::uint64_t size = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&size), sizeof size);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) fail(path, "not an aptab bundle");
  if (version != kBundleVersion) fail(path, fmt::format("unsupported bundle version {}", version));
  std::string text(size, '\0');
  in.read(text.data(), static_cast<std::streamsize>(size));
  const auto header = nlohmann::json::parse(text);

  Bundle bundle;
  bundle.kind = header.at("kind").get<std::string>();
  bundle.header = header.at("meta");
  std::vector<double> buffer;
  for (const auto& entry : header.at("tensors")) {
    const auto shape = entry.at("shape").get<Shape>();
    buffer.resize(shape_numel(shape));
    in.read(reinterpret_cast<char*>(buffer.data()),
            static_cast<std::streamsize>(buffer.size() * sizeof(double)));
    bundle.tensors.push_back(NamedTensor{entry.at("name").get<std::string>(),
                                         Tensor(shape, std::vector<Real>(buffer.begin(), buffer.end()))});
  }
  if (!in) fail(path, "truncated bundle");
  return bundle;
}

}  // namespace aptab
