#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "bsr/gradcore/tensor.hpp"
#include "bsr/segnet/model.hpp"

// Binary checkpoint: "BSRN", u32 version, then per parameter a u32 name
// length, the name, u32 rank, u64 dims and little-endian f64 values.
namespace bsr::segnet {

inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void save_tensors(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors load_tensors(const std::filesystem::path& path);

// Appends every parameter of `params` under "<prefix>.<name>".
void append_params(NamedTensors& out, const std::string& prefix, const ModelParams& params);

// Copies "<prefix>.<name>" entries into a model built for the same
// architecture. Every parameter must be present with a matching shape.
void assign_params(const NamedTensors& tensors, const std::string& prefix, ModelParams& params,
                   const std::string& source = "checkpoint");

// True when any entry starts with "<prefix>.".
bool has_prefix(const NamedTensors& tensors, const std::string& prefix);

}  // namespace bsr::segnet
