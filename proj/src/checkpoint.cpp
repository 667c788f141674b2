#include "flowrl/checkpoint.hpp"

#include <fstream>
#include <stdexcept>

#include "flowrl/version.hpp"

namespace flowrl::io {

std::string hash_hex(const json& j) {
  const std::string s = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", (unsigned long long)h);
  return std::string(buf);
}

json to_json(const diffnet::NetworkSpec& s) {
  return json{{"input_dim", s.input_dim},
              {"hidden_dims", s.hidden_dims},
              {"output_dim", s.output_dim},
              {"activation", diffnet::to_string(s.activation)},
              {"final_layer_zero_init", s.final_layer_zero_init}};
}

diffnet::NetworkSpec network_spec_from_json(const json& j) {
  diffnet::NetworkSpec s;
  s.input_dim = j.at("input_dim").get<int>();
  s.hidden_dims = j.at("hidden_dims").get<std::vector<int>>();
  s.output_dim = j.at("output_dim").get<int>();
  s.activation = diffnet::activation_from_string(j.at("activation").get<std::string>());
  s.final_layer_zero_init = j.at("final_layer_zero_init").get<bool>();
  return s;
}

json to_json(const diffnet::AdamState& a) {
  return json{{"first_moment", a.first_moment}, {"second_moment", a.second_moment},
              {"step_count", a.step_count},     {"lr", a.lr},
              {"beta1", a.beta1},               {"beta2", a.beta2},
              {"eps_adam", a.eps_adam}};
}

diffnet::AdamState adam_from_json(const json& j) {
  diffnet::AdamState a;
  a.first_moment = j.at("first_moment").get<std::vector<double>>();
  a.second_moment = j.at("second_moment").get<std::vector<double>>();
  a.step_count = j.at("step_count").get<std::int64_t>();
  a.lr = j.at("lr").get<double>();
  a.beta1 = j.at("beta1").get<double>();
  a.beta2 = j.at("beta2").get<double>();
  a.eps_adam = j.at("eps_adam").get<double>();
  return a;
}

json to_json(const dyn::SIModel& m) {
  return json{
      {"pos_spec", to_json(m.pos_spec)},
      {"lat_spec", to_json(m.lat_spec)},
      {"with_denoiser", m.with_denoiser},
      {"feat", json{{"n_species", m.feat.n_species},
                    {"dim", m.feat.dim},
                    {"n_max", m.feat.n_max}}},
      {"schedule", json{{"kind", interp::to_string(m.schedule.kind)},
                        {"a_gamma", m.schedule.a_gamma}}},
      {"base", json{{"pack_area", m.base.pack_area}, {"sigma_log", m.base.sigma_log}}},
      {"params", m.params.values}};
}

dyn::SIModel model_from_json(const json& j) {
  dyn::SIModel m;
  m.pos_spec = network_spec_from_json(j.at("pos_spec"));
  m.lat_spec = network_spec_from_json(j.at("lat_spec"));
  m.with_denoiser = j.at("with_denoiser").get<bool>();
  const json& f = j.at("feat");
  m.feat.n_species = f.at("n_species").get<int>();
  m.feat.dim = f.at("dim").get<int>();
  m.feat.n_max = f.at("n_max").get<int>();
  const json& s = j.at("schedule");
  m.schedule.kind = interp::schedule_kind_from_string(s.at("kind").get<std::string>());
  m.schedule.a_gamma = s.at("a_gamma").get<double>();
  const json& b = j.at("base");
  m.base.pack_area = b.at("pack_area").get<double>();
  m.base.sigma_log = b.at("sigma_log").get<double>();
  m.params.values = j.at("params").get<std::vector<double>>();
  if (m.params.size() != m.param_count())
    throw std::runtime_error("checkpoint: parameter count mismatch");
  return m;
}

json to_json(const dyn::AnnealNet& a) {
  json j{{"shared_trunk", a.shared_trunk},
         {"spec", to_json(a.spec)},
         {"params", a.params.values}};
  if (!a.shared_trunk) j["lat_spec"] = to_json(a.lat_spec);
  return j;
}

dyn::AnnealNet anneal_from_json(const json& j) {
  dyn::AnnealNet a;
  a.shared_trunk = j.at("shared_trunk").get<bool>();
  a.spec = network_spec_from_json(j.at("spec"));
  if (!a.shared_trunk) a.lat_spec = network_spec_from_json(j.at("lat_spec"));
  a.params.values = j.at("params").get<std::vector<double>>();
  return a;
}

void save_checkpoint(const Checkpoint& c, const std::string& path) {
  json j{{"format_version", kFormatVersion},
         {"kind", "checkpoint"},
         {"artifact_version", kArtifactVersion},
         {"config_hash", c.config_hash},
         {"model", to_json(c.model)}};
  if (c.anneal) j["anneal"] = to_json(*c.anneal);
  if (c.adam) j["adam"] = to_json(*c.adam);
  write_json_file(j, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  json j = read_json_file(path);
  if (j.value("kind", "") != "checkpoint")
    throw std::runtime_error("not a checkpoint file: " + path);
  Checkpoint c;
  c.model = model_from_json(j.at("model"));
  if (j.contains("anneal")) c.anneal = anneal_from_json(j.at("anneal"));
  if (j.contains("adam")) c.adam = adam_from_json(j.at("adam"));
  c.config_hash = j.value("config_hash", "");
  return c;
}

void write_json_file(const json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << j.dump(2) << "\n";
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  json j;
  in >> j;
  return j;
}

}  // namespace flowrl::io
