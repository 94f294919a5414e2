#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dialm/encoder.hpp"
#include "dialm/tensor.hpp"
#include "json.hpp"

namespace dialm {

class CheckpointError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Named tensors plus free-form JSON metadata.
///
/// On-disk layout (version 1):
///   bytes 0-7    ASCII magic "DIALMCK1"
///   bytes 8-15   manifest length M, uint64 little-endian
///   next M bytes manifest, UTF-8 JSON:
///                {"format":"dialm-checkpoint","version":1,"dtype":"float64",
///                 "byte_order":"little","metadata":{...},
///                 "tensors":[{"name","shape":[rows,cols],"offset","nbytes"}, ...]}
///   payload      IEEE-754 float64 little-endian values, row-major; tensor
///                offsets are relative to the start of the payload.
struct TensorFile {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<std::pair<std::string, Matrix>> tensors;

  void put(std::string name, Matrix m);
  const Matrix* find(std::string_view name) const;
  /// Throws CheckpointError when missing.
  const Matrix& get(std::string_view name) const;
};

void save_tensor_file(const std::filesystem::path& path, const TensorFile& file);
TensorFile load_tensor_file(const std::filesystem::path& path);

nlohmann::json encoder_config_to_json(const EncoderConfig& cfg);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);

/// Adds every encoder tensor under `prefix` + its canonical name.
void put_encoder(TensorFile& file, const EncoderParams& params, const std::string& prefix = "encoder.");

/// Reads encoder tensors back; shapes are checked against cfg.
EncoderParams take_encoder(const TensorFile& file, const EncoderConfig& cfg,
                           const std::string& prefix = "encoder.");

}  // namespace dialm
