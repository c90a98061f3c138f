// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint layout (all integers little-endian):
//
//   "SOTSEPCK"                      8-byte magic
//   u32 version                     currently 1
//   u32 len, bytes                  variant tag
//   u32 n, n x (u32 len, key, u32 len, value)
//                                   config block, values as text
//   tensor block
//
// Tensor block: u32 count, then per tensor u32 name length, name bytes,
// u32 rank, rank x u64 dims, prod(dims) x f64 values. Dataset feature files
// reuse it after their own magic.

#ifndef SOTSEP_CHECKPOINT_HPP
#define SOTSEP_CHECKPOINT_HPP

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sotsep/models.hpp"

namespace sotsep {

inline constexpr char kCheckpointMagic[8] = {'S', 'O', 'T', 'S', 'E', 'P', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

using ConfigEntries = std::vector<std::pair<std::string, std::string>>;

void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
void write_f64(std::ostream& out, double v);
void write_string(std::ostream& out, const std::string& s);
std::uint32_t read_u32(std::istream& in);
std::uint64_t read_u64(std::istream& in);
double read_f64(std::istream& in);
std::string read_string(std::istream& in, std::size_t max_len = 1 << 20);

void write_tensor_block(std::ostream& out, std::span<const NamedTensor> tensors);
std::vector<NamedTensor> read_tensor_block(std::istream& in);

// Shortest text that parses back to the same double.
std::string format_double(double v);
double parse_double(const std::string& text, const std::string& what);

ConfigEntries model_config_entries(const ModelConfig& config);
ModelConfig model_config_from_entries(Variant variant, const ConfigEntries& entries);

std::string checkpoint_bytes(const Model& model);
Model model_from_checkpoint_bytes(const std::string& bytes);

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

// Elementwise mean of same-shaped models.
Model average_models(std::span<const Model> models);

}  // namespace sotsep

#endif  // SOTSEP_CHECKPOINT_HPP
