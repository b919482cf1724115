#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "xdvae/config.hpp"
#include "xdvae/errors.hpp"
#include "xdvae/io_util.hpp"
#include "xdvae/model.hpp"

namespace xdvae {

// XDV1 layout: "XDV1", u32 header length, JSON header, then every tensor as
// little-endian f32, row-major, in the header's declared order.

inline constexpr int kCheckpointVersion = 1;

template <typename Scalar>
struct Checkpoint {
  ModelParams<Scalar> params;
  ModelConfig config;
};

template <typename Scalar>
nlohmann::json checkpoint_header(const ModelParams<Scalar>& p, const ModelConfig& cfg) {
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& v : p.views()) tensors.push_back({{"name", v.name}, {"shape", {v.rows, v.cols}}});
  return {{"format_version", kCheckpointVersion},
          {"variant", variant_name(p.variant)},
          {"dims",
           {{"n_source", p.n_source},
            {"n_target", p.n_target},
            {"latent", p.latent},
            {"aux_input", p.aux_input},
            {"aux_attach", aux_attach_name(p.aux_attach)}}},
          {"config", cfg.to_json()},
          {"seed", cfg.seed},
          {"tensors", tensors}};
}

template <typename Scalar>
std::string encode_checkpoint(const ModelParams<Scalar>& p, const ModelConfig& cfg) {
  if (cfg.variant != p.variant) throw FormatError("checkpoint: config variant does not match parameters");
  const std::string header = checkpoint_header(p, cfg).dump();
  ByteWriter w;
  w.magic("XDV1");
  w.u32(static_cast<std::uint32_t>(header.size()));
  w.bytes(header);
  for (const auto& v : p.views()) {
    const auto m = v.map();
    for (Eigen::Index r = 0; r < v.rows; ++r)
      for (Eigen::Index c = 0; c < v.cols; ++c) w.f32(static_cast<float>(m(r, c)));
  }
  return w.data();
}

template <typename Scalar>
void save_checkpoint(const ModelParams<Scalar>& p, const ModelConfig& cfg, const std::filesystem::path& path) {
  write_text(path, encode_checkpoint(p, cfg));
}

template <typename Scalar>
Checkpoint<Scalar> decode_checkpoint(std::string bytes, const std::string& what = "checkpoint") {
  ByteReader r(std::move(bytes), what);
  r.expect_magic("XDV1");
  const auto len = r.u32();
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(r.take(len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(what + ": corrupt header: " + e.what());
  }
  try {
    const int version = h.at("format_version").get<int>();
    if (version != kCheckpointVersion) {
      throw FormatError(what + ": unsupported format_version " + std::to_string(version));
    }
    Checkpoint<Scalar> ck;
    ck.config.merge_json(h.at("config"));
    const auto variant = parse_variant(h.at("variant").get<std::string>());
    if (variant != ck.config.variant) throw FormatError(what + ": header variant disagrees with config echo");
    const auto& d = h.at("dims");
    ck.params = build_model<Scalar>(ck.config, d.at("n_source").get<std::size_t>(), d.at("n_target").get<std::size_t>(),
                                    d.at("aux_input").get<std::size_t>());
    if (ck.params.latent != d.at("latent").get<Eigen::Index>()) throw FormatError(what + ": latent size mismatch");

    const auto views = ck.params.views();
    const auto& tensors = h.at("tensors");
    if (!tensors.is_array()) throw FormatError(what + ": tensors must be a list");
    // Schema check both ways: every tensor the variant needs, nothing else.
    for (std::size_t k = 0; k < views.size(); ++k) {
      if (k >= tensors.size()) throw FormatError(what + ": missing tensor " + views[k].name);
      const auto name = tensors[k].at("name").template get<std::string>();
      if (name != views[k].name) {
        throw FormatError(what + ": expected tensor " + views[k].name + ", header declares " + name);
      }
      const auto shape = tensors[k].at("shape").template get<std::vector<Eigen::Index>>();
      if (shape.size() != 2 || shape[0] != views[k].rows || shape[1] != views[k].cols) {
        throw FormatError(what + ": shape mismatch for " + name);
      }
    }
    if (tensors.size() != views.size()) {
      throw FormatError(what + ": unexpected tensor " + tensors[views.size()].at("name").template get<std::string>());
    }
    for (const auto& v : views) {
      auto m = v.map();
      for (Eigen::Index row = 0; row < v.rows; ++row)
        for (Eigen::Index c = 0; c < v.cols; ++c) m(row, c) = static_cast<Scalar>(r.f32());
    }
    r.expect_end();
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(what + ": corrupt header: " + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(what + ": " + e.what());
  }
}

template <typename Scalar>
Checkpoint<Scalar> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint<Scalar>(read_file(path), path.string());
}

}  // namespace xdvae
