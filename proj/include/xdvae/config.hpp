#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "xdvae/losses.hpp"

namespace xdvae {

enum class InferenceMode { Mean, Sample };
enum class AuxAttach { Source, Target, Both };

std::string aux_attach_name(AuxAttach a);
AuxAttach parse_aux_attach(const std::string& name);

struct ModelConfig {
  Variant variant = Variant::Generic;
  double beta = 15.0;
  double lambda_reg = 1e-4;
  double lr = 1e-3;
  std::size_t batch_size = 32;
  std::size_t epochs = 100;
  std::size_t latent_dim = 128;
  /// Hidden widths between the input and the latent heads; the decoder
  /// mirrors them in reverse.
  std::vector<std::size_t> source_dims{256};
  std::vector<std::size_t> target_dims{256};
  /// Auxiliary sub-encoder widths after the d_aux input.
  std::vector<std::size_t> aux_dims{128};
  AuxAttach aux_attach = AuxAttach::Both;
  /// Treat z_T as a constant target in the cold-start mapping loss.
  bool map_stop_gradient = false;
  std::uint64_t seed = 0;
  InferenceMode inference_mode = InferenceMode::Mean;
  bool early_stop = false;
  std::size_t patience = 10;
  double min_delta = 1e-4;

  /// Throws std::invalid_argument on out-of-range values.
  void validate() const;
  nlohmann::json to_json() const;
  /// Missing keys keep their current values.
  void merge_json(const nlohmann::json& j);
};

/// MovieLens: n-256-128, batch 32, beta 15. Amazon: n-512-256-128, batch 128, beta 40.
ModelConfig movielens_preset();
ModelConfig amazon_preset();

}  // namespace xdvae
