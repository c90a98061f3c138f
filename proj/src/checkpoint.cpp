// SPDX-License-Identifier: Apache-2.0

#include "sotsep/checkpoint.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "sotsep/error.hpp"

namespace sotsep {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

namespace {

void put_bytes(std::ostream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void get_bytes(std::istream& in, void* p, std::size_t n) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) fail(ErrorCode::kFormat, "unexpected end of file");
}

std::string join(const std::vector<std::string>& tokens) {
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty()) out += ' ';
    out += t;
  }
  return out;
}

std::vector<std::string> split_ws(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  for (std::string t; in >> t;) out.push_back(t);
  return out;
}

std::size_t parse_size(const std::string& text, const std::string& what) {
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    fail(ErrorCode::kFormat, what + ": expected a non-negative integer, got '" + text + "'");
  }
  return v;
}

bool parse_flag(const std::string& text, const std::string& what) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  fail(ErrorCode::kFormat, what + ": expected true or false, got '" + text + "'");
}

}  // namespace

void write_u32(std::ostream& out, std::uint32_t v) { put_bytes(out, &v, 4); }
void write_u64(std::ostream& out, std::uint64_t v) { put_bytes(out, &v, 8); }
void write_f64(std::ostream& out, double v) { put_bytes(out, &v, 8); }

void write_string(std::ostream& out, const std::string& s) {
  write_u32(out, static_cast<std::uint32_t>(s.size()));
  put_bytes(out, s.data(), s.size());
}

std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v;
  get_bytes(in, &v, 4);
  return v;
}

std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v;
  get_bytes(in, &v, 8);
  return v;
}

double read_f64(std::istream& in) {
  double v;
  get_bytes(in, &v, 8);
  return v;
}

std::string read_string(std::istream& in, std::size_t max_len) {
  const std::uint32_t n = read_u32(in);
  if (n > max_len) fail(ErrorCode::kFormat, "string length " + std::to_string(n) + " is implausible");
  std::string s(n, '\0');
  get_bytes(in, s.data(), n);
  return s;
}

void write_tensor_block(std::ostream& out, std::span<const NamedTensor> tensors) {
  write_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const NamedTensor& t : tensors) {
    write_string(out, t.name);
    write_u32(out, static_cast<std::uint32_t>(t.value.rank()));
    for (std::size_t d : t.value.shape()) write_u64(out, d);
    put_bytes(out, t.value.data(), t.value.size() * sizeof(double));
  }
}

std::vector<NamedTensor> read_tensor_block(std::istream& in) {
  const std::uint32_t count = read_u32(in);
  std::vector<NamedTensor> out;
  out.reserve(std::min<std::uint32_t>(count, 1 << 16));
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = read_string(in, 4096);
    const std::uint32_t rank = read_u32(in);
    if (rank > 8) fail(ErrorCode::kFormat, "tensor '" + name + "' has rank " + std::to_string(rank));
    Shape shape(rank);
    std::uint64_t total = 1;
    for (auto& d : shape) {
      d = read_u64(in);
      total *= d;
      if (total > (1ull << 32)) fail(ErrorCode::kFormat, "tensor '" + name + "' is implausibly large");
    }
    std::vector<double> values(total);
    get_bytes(in, values.data(), total * sizeof(double));
    out.push_back({std::move(name), Tensor(std::move(shape), std::move(values))});
  }
  return out;
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) fail(ErrorCode::kFormat, "cannot format number");
  return std::string(buf, ptr);
}

double parse_double(const std::string& text, const std::string& what) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size() || !std::isfinite(v)) {
    fail(ErrorCode::kFormat, what + ": expected a number, got '" + text + "'");
  }
  return v;
}

ConfigEntries model_config_entries(const ModelConfig& c) {
  auto flag = [](bool b) { return std::string(b ? "true" : "false"); };
  return {
      {"content_tokens", join(c.content_tokens)},
      {"feature_dim", std::to_string(c.feature_dim)},
      {"encoder_hidden", std::to_string(c.encoder_hidden)},
      {"encoder_layers", std::to_string(c.encoder_layers)},
      {"encoder_bidirectional", flag(c.encoder_bidirectional)},
      {"separator_layers", std::to_string(c.separator.lstm_layers)},
      {"separator_hidden", std::to_string(c.separator.lstm_hidden)},
      {"separator_bidirectional", flag(c.separator.bidirectional)},
      {"max_speakers", std::to_string(c.separator.max_speakers)},
      {"embed_dim", std::to_string(c.embed_dim)},
      {"decoder_hidden", std::to_string(c.decoder_hidden)},
      {"attention_dim", std::to_string(c.attention_dim)},
      {"ctc_includes_sc", flag(c.ctc_includes_sc)},
      {"layer_norm_eps", format_double(c.layer_norm_eps)},
  };
}

ModelConfig model_config_from_entries(Variant variant, const ConfigEntries& entries) {
  ModelConfig c;
  c.variant = variant;
  std::map<std::string, std::string> seen;
  for (const auto& [k, v] : entries) {
    if (!seen.emplace(k, v).second) fail(ErrorCode::kFormat, "duplicate config key '" + k + "'");
  }
  auto take = [&](const std::string& key) {
    auto it = seen.find(key);
    if (it == seen.end()) fail(ErrorCode::kFormat, "checkpoint config lacks '" + key + "'");
    std::string v = it->second;
    seen.erase(it);
    return v;
  };
  c.content_tokens = split_ws(take("content_tokens"));
  c.feature_dim = parse_size(take("feature_dim"), "feature_dim");
  c.encoder_hidden = parse_size(take("encoder_hidden"), "encoder_hidden");
  c.encoder_layers = parse_size(take("encoder_layers"), "encoder_layers");
  c.encoder_bidirectional = parse_flag(take("encoder_bidirectional"), "encoder_bidirectional");
  c.separator.lstm_layers = parse_size(take("separator_layers"), "separator_layers");
  c.separator.lstm_hidden = parse_size(take("separator_hidden"), "separator_hidden");
  c.separator.bidirectional = parse_flag(take("separator_bidirectional"), "separator_bidirectional");
  c.separator.max_speakers = parse_size(take("max_speakers"), "max_speakers");
  c.embed_dim = parse_size(take("embed_dim"), "embed_dim");
  c.decoder_hidden = parse_size(take("decoder_hidden"), "decoder_hidden");
  c.attention_dim = parse_size(take("attention_dim"), "attention_dim");
  c.ctc_includes_sc = parse_flag(take("ctc_includes_sc"), "ctc_includes_sc");
  c.layer_norm_eps = parse_double(take("layer_norm_eps"), "layer_norm_eps");
  if (!seen.empty()) fail(ErrorCode::kFormat, "unknown checkpoint config key '" + seen.begin()->first + "'");
  return c;
}

std::string checkpoint_bytes(const Model& model) {
  std::ostringstream out(std::ios::binary);
  put_bytes(out, kCheckpointMagic, sizeof kCheckpointMagic);
  write_u32(out, kCheckpointVersion);
  write_string(out, variant_name(model.variant()));
  const ConfigEntries entries = model_config_entries(model.config());
  write_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [k, v] : entries) {
    write_string(out, k);
    write_string(out, v);
  }
  write_tensor_block(out, model.parameters());
  return std::move(out).str();
}

Model model_from_checkpoint_bytes(const std::string& bytes) {
  std::istringstream in(bytes, std::ios::binary);
  char magic[sizeof kCheckpointMagic];
  get_bytes(in, magic, sizeof magic);
  if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) fail(ErrorCode::kFormat, "not a checkpoint (bad magic)");
  const std::uint32_t version = read_u32(in);
  if (version != kCheckpointVersion) {
    fail(ErrorCode::kFormat, "unsupported checkpoint version " + std::to_string(version));
  }
  const Variant variant = parse_variant(read_string(in, 64));
  const std::uint32_t n = read_u32(in);
  if (n > 1024) fail(ErrorCode::kFormat, "implausible config entry count");
  ConfigEntries entries;
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string k = read_string(in, 256);
    std::string v = read_string(in);
    entries.emplace_back(std::move(k), std::move(v));
  }
  const ModelConfig config = model_config_from_entries(variant, entries);
  const auto params = read_tensor_block(in);
  if (in.peek() != std::char_traits<char>::eof()) fail(ErrorCode::kFormat, "trailing bytes after checkpoint");
  // Build the skeleton, then overwrite every weight; set_parameters checks
  // that names and shapes line up.
  Model model(config, 0);
  model.set_parameters(params);
  return model;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  const std::string bytes = checkpoint_bytes(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::kIo, "write failed for " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return model_from_checkpoint_bytes(std::move(buf).str());
}

Model average_models(std::span<const Model> models) {
  if (models.empty()) fail(ErrorCode::kInvalidArgument, "nothing to average");
  auto acc = models[0].parameters();
  std::vector<std::vector<double>> sums;
  for (const auto& p : acc) sums.emplace_back(p.value.values().begin(), p.value.values().end());
  for (std::size_t m = 1; m < models.size(); ++m) {
    const auto other = models[m].parameters();
    if (other.size() != acc.size()) fail(ErrorCode::kMismatch, "models differ in parameter count");
    for (std::size_t i = 0; i < acc.size(); ++i) {
      if (other[i].name != acc[i].name || other[i].value.shape() != acc[i].value.shape()) {
        fail(ErrorCode::kMismatch, "models differ at parameter '" + acc[i].name + "'");
      }
      auto v = other[i].value.values();
      for (std::size_t j = 0; j < v.size(); ++j) sums[i][j] += v[j];
    }
  }
  const double inv = 1.0 / static_cast<double>(models.size());
  for (std::size_t i = 0; i < acc.size(); ++i) {
    for (double& x : sums[i]) x *= inv;
    acc[i].value = Tensor(acc[i].value.shape(), std::move(sums[i]));
  }
  Model out = models[0];
  out.set_parameters(acc);
  return out;
}

}  // namespace sotsep
