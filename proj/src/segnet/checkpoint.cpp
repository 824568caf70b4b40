#include "bsr/segnet/checkpoint.hpp"

#include <unordered_map>

#include "bsr/binary_io.hpp"
#include "bsr/errors.hpp"

namespace bsr::segnet {

void save_tensors(const std::filesystem::path& path, const NamedTensors& tensors) {
  binio::Writer w;
  w.put_magic("BSRN");
  w.put<std::uint32_t>(kCheckpointVersion);
  for (const auto& [name, t] : tensors) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.put_bytes(name.data(), name.size());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.put<std::uint64_t>(d);
    w.put_doubles(t.storage());
  }
  binio::write_file_atomic(path, w.bytes());
}

NamedTensors load_tensors(const std::filesystem::path& path) {
  binio::Reader r(path.string(), binio::read_file(path));
  r.expect_magic("BSRN");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw IoError(path.string(), "unsupported checkpoint version " + std::to_string(version) + " (expected " +
                                     std::to_string(kCheckpointVersion) + ")");
  }
  NamedTensors out;
  while (!r.done()) {
    const auto name_len = r.get<std::uint32_t>();
    std::string name = r.get_string(name_len);
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw IoError(path.string(), "implausible rank " + std::to_string(rank) + " for '" + name + "'");
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
    // Guard the allocation against corrupted dims before reading.
    std::size_t n = 1;
    for (std::size_t d : shape) {
      if (d != 0 && n > r.remaining() / d) throw IoError(path.string(), "truncated data for '" + name + "'");
      n *= d;
    }
    out.emplace_back(std::move(name), Tensor(std::move(shape), r.get_doubles(n)));
  }
  return out;
}

void append_params(NamedTensors& out, const std::string& prefix, const ModelParams& params) {
  for (const GradPair* p : params.parameters()) out.emplace_back(prefix + "." + p->name, p->value);
}

void assign_params(const NamedTensors& tensors, const std::string& prefix, ModelParams& params,
                   const std::string& source) {
  std::unordered_map<std::string, const Tensor*> index;
  for (const auto& [name, t] : tensors) index.emplace(name, &t);
  for (GradPair* p : params.parameters()) {
    const std::string key = prefix + "." + p->name;
    auto it = index.find(key);
    if (it == index.end()) throw IoError(source, "missing parameter '" + key + "'");
    if (it->second->shape() != p->value.shape()) {
      throw IoError(source, "parameter '" + key + "' has shape " + shape_str(it->second->shape()) + ", expected " +
                                shape_str(p->value.shape()));
    }
    p->value = *it->second;
    p->grad.set_zero();
  }
}

bool has_prefix(const NamedTensors& tensors, const std::string& prefix) {
  const std::string p = prefix + ".";
  for (const auto& entry : tensors) {
    if (entry.first.compare(0, p.size(), p) == 0) return true;
  }
  return false;
}

}  // namespace bsr::segnet
