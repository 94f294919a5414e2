#include "dialm/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

namespace dialm {

namespace {

constexpr std::array<char, 8> kMagic = {'D', 'I', 'A', 'L', 'M', 'C', 'K', '1'};

void write_u64_le(std::ostream& out, std::uint64_t v) {
  std::array<char, 8> bytes;
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(bytes.data(), 8);
}

std::uint64_t read_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

void TensorFile::put(std::string name, Matrix m) {
  for (auto& [n, t] : tensors) {
    if (n == name) {
      t = std::move(m);
      return;
    }
  }
  tensors.emplace_back(std::move(name), std::move(m));
}

const Matrix* TensorFile::find(std::string_view name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

const Matrix& TensorFile::get(std::string_view name) const {
  if (const Matrix* m = find(name)) return *m;
  throw CheckpointError("checkpoint has no tensor '" + std::string(name) + "'");
}

void save_tensor_file(const std::filesystem::path& path, const TensorFile& file) {
  nlohmann::json manifest;
  manifest["format"] = "dialm-checkpoint";
  manifest["version"] = 1;
  manifest["dtype"] = "float64";
  manifest["byte_order"] = "little";
  manifest["metadata"] = file.metadata;
  manifest["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, m] : file.tensors) {
    const std::uint64_t nbytes = m.size() * 8;
    manifest["tensors"].push_back(
        {{"name", name}, {"shape", {m.rows(), m.cols()}}, {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  const std::string text = manifest.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write " + path.string());
  out.write(kMagic.data(), kMagic.size());
  write_u64_le(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, m] : file.tensors) {
    for (double v : m.values()) write_u64_le(out, std::bit_cast<std::uint64_t>(v));
  }
  if (!out) throw CheckpointError("write failed: " + path.string());
}

TensorFile load_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic.data(), kMagic.size()) != 0) {
    throw CheckpointError(path.string() + ": not a dialm checkpoint");
  }
  const std::uint64_t manifest_len = read_u64_le(bytes.data() + 8);
  if (16 + manifest_len > bytes.size()) throw CheckpointError(path.string() + ": truncated manifest");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + 16,
                                     bytes.begin() + 16 + static_cast<std::ptrdiff_t>(manifest_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw CheckpointError(path.string() + ": bad manifest: " + e.what());
  }
  if (manifest.value("version", 0) != 1 || manifest.value("dtype", "") != "float64") {
    throw CheckpointError(path.string() + ": unsupported checkpoint version or dtype");
  }

  const unsigned char* payload = bytes.data() + 16 + manifest_len;
  const std::uint64_t payload_len = bytes.size() - 16 - manifest_len;
  TensorFile file;
  file.metadata = manifest.value("metadata", nlohmann::json::object());
  for (const auto& t : manifest.at("tensors")) {
    const auto rows = t.at("shape").at(0).get<std::size_t>();
    const auto cols = t.at("shape").at(1).get<std::size_t>();
    const auto offset = t.at("offset").get<std::uint64_t>();
    const auto nbytes = t.at("nbytes").get<std::uint64_t>();
    if (nbytes != rows * cols * 8 || offset + nbytes > payload_len) {
      throw CheckpointError(path.string() + ": tensor " + t.at("name").get<std::string>() +
                            " has inconsistent size");
    }
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) {
      m[i] = std::bit_cast<double>(read_u64_le(payload + offset + 8 * i));
    }
    file.tensors.emplace_back(t.at("name").get<std::string>(), std::move(m));
  }
  return file;
}

nlohmann::json encoder_config_to_json(const EncoderConfig& cfg) {
  return {{"num_layers", cfg.num_layers},       {"num_heads", cfg.num_heads},
          {"hidden", cfg.hidden},               {"ffn_dim", cfg.ffn_dim},
          {"vocab_size", cfg.vocab_size},       {"max_positions", cfg.max_positions},
          {"num_segments", cfg.num_segments},   {"dropout", cfg.dropout},
          {"layer_norm_eps", cfg.layer_norm_eps}};
}

EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig cfg;
  cfg.num_layers = j.value("num_layers", cfg.num_layers);
  cfg.num_heads = j.value("num_heads", cfg.num_heads);
  cfg.hidden = j.value("hidden", cfg.hidden);
  cfg.ffn_dim = j.value("ffn_dim", cfg.ffn_dim);
  cfg.vocab_size = j.value("vocab_size", cfg.vocab_size);
  cfg.max_positions = j.value("max_positions", cfg.max_positions);
  cfg.num_segments = j.value("num_segments", cfg.num_segments);
  cfg.dropout = j.value("dropout", cfg.dropout);
  cfg.layer_norm_eps = j.value("layer_norm_eps", cfg.layer_norm_eps);
  return cfg;
}

void put_encoder(TensorFile& file, const EncoderParams& params, const std::string& prefix) {
  params.for_each([&](const std::string& name, const Matrix& m) { file.put(prefix + name, m); });
}

EncoderParams take_encoder(const TensorFile& file, const EncoderConfig& cfg,
                           const std::string& prefix) {
  EncoderParams p = zero_params(cfg);
  p.for_each([&](const std::string& name, Matrix& m) {
    const Matrix& src = file.get(prefix + name);
    if (!src.same_shape(m)) {
      throw CheckpointError("tensor " + prefix + name + " has shape " + shape_string(src) +
                            ", expected " + shape_string(m));
    }
    m = src;
  });
  return p;
}

}  // namespace dialm
