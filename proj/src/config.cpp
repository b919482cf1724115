#include "xdvae/config.hpp"

#include <cmath>
#include <stdexcept>

namespace xdvae {

using nlohmann::json;

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::Generic: return "generic";
    case Variant::Single: return "single";
    case Variant::Merged: return "merged";
    case Variant::NoMMD: return "no-mmd";
    case Variant::ColdStart: return "cold-start";
    case Variant::Aux: return "aux";
  }
  return "unknown";
}

Variant parse_variant(const std::string& name) {
  if (name == "generic") return Variant::Generic;
  if (name == "single") return Variant::Single;
  if (name == "merged") return Variant::Merged;
  if (name == "no-mmd" || name == "nommd" || name == "mmd0") return Variant::NoMMD;
  if (name == "cold-start" || name == "coldstart") return Variant::ColdStart;
  if (name == "aux") return Variant::Aux;
  throw std::invalid_argument("unknown variant '" + name + "'");
}

std::string aux_attach_name(AuxAttach a) {
  switch (a) {
    case AuxAttach::Source: return "source";
    case AuxAttach::Target: return "target";
    case AuxAttach::Both: return "both";
  }
  return "both";
}

AuxAttach parse_aux_attach(const std::string& name) {
  if (name == "source") return AuxAttach::Source;
  if (name == "target") return AuxAttach::Target;
  if (name == "both") return AuxAttach::Both;
  throw std::invalid_argument("unknown aux attachment '" + name + "'");
}

LossBreakdown& LossBreakdown::operator+=(const LossBreakdown& o) {
  recon_source += o.recon_source;
  recon_target += o.recon_target;
  kl_source += o.kl_source;
  kl_target += o.kl_target;
  reg += o.reg;
  mmd += o.mmd;
  map_loss += o.map_loss;
  total += o.total;
  return *this;
}

LossBreakdown& LossBreakdown::operator*=(double s) {
  recon_source *= s;
  recon_target *= s;
  kl_source *= s;
  kl_target *= s;
  reg *= s;
  mmd *= s;
  map_loss *= s;
  total *= s;
  return *this;
}

bool LossBreakdown::finite() const {
  for (double x : {recon_source, recon_target, kl_source, kl_target, reg, mmd, map_loss, total})
    if (!std::isfinite(x)) return false;
  return true;
}

json LossBreakdown::to_json() const {
  return {{"recon_source", recon_source}, {"recon_target", recon_target}, {"kl_source", kl_source},
          {"kl_target", kl_target},       {"reg", reg},                   {"mmd", mmd},
          {"map_loss", map_loss},         {"total", total}};
}

LossBreakdown compose_total(Variant variant, const LossComponents& c) {
  auto need = [&](const std::optional<double>& x, const char* name) {
    if (!x) throw std::invalid_argument("compose_total: variant " + variant_name(variant) + " needs " + name);
    return *x;
  };
  LossBreakdown b;
  switch (variant) {
    case Variant::Generic:
    case Variant::Aux:
    case Variant::NoMMD:
    case Variant::ColdStart:
      b.recon_source = need(c.recon_source, "recon_source");
      b.kl_source = need(c.kl_source, "kl_source");
      b.recon_target = need(c.recon_target, "recon_target");
      b.kl_target = need(c.kl_target, "kl_target");
      b.reg = need(c.reg, "reg");
      if (variant != Variant::NoMMD) b.mmd = need(c.mmd, "mmd");
      if (variant == Variant::ColdStart) b.map_loss = need(c.map_loss, "map_loss");
      b.total = b.recon_source + b.kl_source + b.recon_target + b.kl_target + b.reg + b.mmd + b.map_loss;
      break;
    case Variant::Single:
      b.recon_target = need(c.recon_target, "recon_target");
      b.kl_target = need(c.kl_target, "kl_target");
      b.reg = need(c.reg, "reg");
      b.total = b.recon_target + b.kl_target + b.reg;
      break;
    case Variant::Merged:
      b.recon_source = need(c.recon_source, "recon_source");
      b.recon_target = need(c.recon_target, "recon_target");
      b.kl_target = need(c.kl_target, "kl_target");
      b.reg = need(c.reg, "reg");
      b.total = b.recon_source + b.recon_target + b.kl_target + b.reg;
      break;
  }
  return b;
}

void ModelConfig::validate() const {
  if (!(beta >= 0.0)) throw std::invalid_argument("beta must be >= 0");
  if (!(lambda_reg >= 0.0)) throw std::invalid_argument("lambda_reg must be >= 0");
  if (!(lr > 0.0)) throw std::invalid_argument("lr must be > 0");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (latent_dim < 1) throw std::invalid_argument("latent_dim must be >= 1");
  for (const auto* dims : {&source_dims, &target_dims, &aux_dims})
    for (auto d : *dims)
      if (d < 1) throw std::invalid_argument("layer widths must be >= 1");
  if (variant == Variant::Aux && aux_dims.empty()) throw std::invalid_argument("aux variant needs aux_dims");
}

json ModelConfig::to_json() const {
  return {{"variant", variant_name(variant)},
          {"beta", beta},
          {"lambda_reg", lambda_reg},
          {"lr", lr},
          {"batch_size", batch_size},
          {"epochs", epochs},
          {"latent_dim", latent_dim},
          {"source_dims", source_dims},
          {"target_dims", target_dims},
          {"aux_dims", aux_dims},
          {"aux_attach", aux_attach_name(aux_attach)},
          {"map_stop_gradient", map_stop_gradient},
          {"seed", seed},
          {"inference_mode", inference_mode == InferenceMode::Mean ? "mean" : "sample"},
          {"early_stop", early_stop},
          {"patience", patience},
          {"min_delta", min_delta}};
}

void ModelConfig::merge_json(const json& j) {
  if (j.contains("variant")) variant = parse_variant(j.at("variant").get<std::string>());
  if (j.contains("beta")) beta = j.at("beta").get<double>();
  if (j.contains("lambda_reg")) lambda_reg = j.at("lambda_reg").get<double>();
  if (j.contains("lr")) lr = j.at("lr").get<double>();
  if (j.contains("batch_size")) batch_size = j.at("batch_size").get<std::size_t>();
  if (j.contains("epochs")) epochs = j.at("epochs").get<std::size_t>();
  if (j.contains("latent_dim")) latent_dim = j.at("latent_dim").get<std::size_t>();
  if (j.contains("dims")) source_dims = target_dims = j.at("dims").get<std::vector<std::size_t>>();
  if (j.contains("source_dims")) source_dims = j.at("source_dims").get<std::vector<std::size_t>>();
  if (j.contains("target_dims")) target_dims = j.at("target_dims").get<std::vector<std::size_t>>();
  if (j.contains("aux_dims")) aux_dims = j.at("aux_dims").get<std::vector<std::size_t>>();
  if (j.contains("aux_attach")) aux_attach = parse_aux_attach(j.at("aux_attach").get<std::string>());
  if (j.contains("map_stop_gradient")) map_stop_gradient = j.at("map_stop_gradient").get<bool>();
  if (j.contains("seed")) seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("inference_mode")) {
    const auto m = j.at("inference_mode").get<std::string>();
    if (m != "mean" && m != "sample") throw std::invalid_argument("inference_mode must be mean or sample");
    inference_mode = m == "mean" ? InferenceMode::Mean : InferenceMode::Sample;
  }
  if (j.contains("early_stop")) early_stop = j.at("early_stop").get<bool>();
  if (j.contains("patience")) patience = j.at("patience").get<std::size_t>();
  if (j.contains("min_delta")) min_delta = j.at("min_delta").get<double>();
}

ModelConfig movielens_preset() {
  ModelConfig c;
  c.source_dims = c.target_dims = {256};
  c.latent_dim = 128;
  c.batch_size = 32;
  c.beta = 15.0;
  c.lr = 1e-3;
  c.epochs = 100;
  return c;
}

ModelConfig amazon_preset() {
  ModelConfig c;
  c.source_dims = c.target_dims = {512, 256};
  c.latent_dim = 128;
  c.batch_size = 128;
  c.beta = 40.0;
  c.lr = 1e-3;
  c.epochs = 100;
  return c;
}

}  // namespace xdvae
