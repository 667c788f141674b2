#include "flowrl/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "flowrl/parallel.hpp"

namespace flowrl::pretrain {

using diffnet::Expr;
using diffnet::Tape;

interp::InterpolantSchedule lattice_schedule(const interp::InterpolantSchedule& s) {
  interp::InterpolantSchedule out = s;
  if (out.kind == interp::ScheduleKind::TrigGamma)
    out.kind = interp::ScheduleKind::Trig;
  return out;
}

BatchItem make_batch_item(const interp::InterpolantSchedule& schedule, double t,
                          const world::ToyStructure& x0,
                          const world::ToyStructure& x1,
                          std::span<const double> z_pos) {
  BatchItem it;
  it.t = t;
  it.comp = x1.comp;
  it.x0_frac = x0.frac;
  it.x1_frac = x1.frac;
  it.z_pos.assign(z_pos.begin(), z_pos.end());
  it.x0_cell = x0.cell;
  it.x1_cell = x1.cell;
  it.xt_frac = interp::interpolate(schedule, t, x0.frac, x1.frac, z_pos,
                                   interp::Geometry::TorusUnit);
  it.target_pos = interp::conditional_velocity(schedule, t, x0.frac, x1.frac,
                                               z_pos, interp::Geometry::TorusUnit);
  const auto lat_sched = lattice_schedule(schedule);
  it.xt_cell = interp::interpolate(lat_sched, t, x0.cell, x1.cell, {},
                                   interp::Geometry::Euclidean);
  it.target_lat = interp::conditional_velocity(lat_sched, t, x0.cell, x1.cell,
                                               {}, interp::Geometry::Euclidean);
  return it;
}

namespace {

struct BatchCounts {
  double pos_components = 0.0;
  double lat_components = 0.0;
};

BatchCounts count_components(const std::vector<BatchItem>& batch, int dim) {
  BatchCounts c;
  for (const auto& it : batch) {
    c.pos_components += double(it.comp.n() * dim);
    c.lat_components += double(dim);
  }
  return c;
}

// sum of squared errors of the velocity head against the conditional
// velocity, one item, one tape
Expr item_pos_sse(Tape& tape, const dyn::SIModel& m, const BatchItem& it) {
  const int d = m.feat.dim;
  std::vector<double> feat(static_cast<std::size_t>(m.pos_spec.input_dim));
  Expr acc{};
  for (int i = 0; i < it.comp.n(); ++i) {
    features::pos_features(m.feat, it.t, it.comp, it.xt_frac, it.xt_cell, i, feat);
    Expr out = tape.net_forward(m.pos_spec, m.pos_offset(), feat);
    Expr vel = m.with_denoiser ? tape.slice(out, 0, d) : out;
    Expr target = tape.constant(std::vector<double>(
        it.target_pos.begin() + i * d, it.target_pos.begin() + (i + 1) * d));
    Expr sse = tape.sum(tape.square(tape.sub(vel, target)));
    acc = acc.valid() ? tape.add(acc, sse) : sse;
  }
  return acc;
}

Expr item_lat_sse(Tape& tape, const dyn::SIModel& m, const BatchItem& it) {
  std::vector<double> feat(static_cast<std::size_t>(m.lat_spec.input_dim));
  features::lat_features(m.feat, it.t, it.comp, it.xt_frac, it.xt_cell, feat);
  Expr out = tape.net_forward(m.lat_spec, m.lat_offset(), feat);
  Expr target = tape.constant(it.target_lat);
  return tape.sum(tape.square(tape.sub(out, target)));
}

Expr item_z_sse(Tape& tape, const dyn::SIModel& m, const BatchItem& it) {
  const int d = m.feat.dim;
  std::vector<double> feat(static_cast<std::size_t>(m.pos_spec.input_dim));
  Expr acc{};
  for (int i = 0; i < it.comp.n(); ++i) {
    features::pos_features(m.feat, it.t, it.comp, it.xt_frac, it.xt_cell, i, feat);
    Expr out = tape.net_forward(m.pos_spec, m.pos_offset(), feat);
    Expr zhat = tape.slice(out, d, d);
    Expr target = tape.constant(std::vector<double>(
        it.z_pos.begin() + i * d, it.z_pos.begin() + (i + 1) * d));
    Expr sse = tape.sum(tape.square(tape.sub(zhat, target)));
    acc = acc.valid() ? tape.add(acc, sse) : sse;
  }
  return acc;
}

}  // namespace

Expr velocity_loss_tape(Tape& tape, const dyn::SIModel& m,
                        const std::vector<BatchItem>& batch, double w_pos,
                        double w_lat) {
  if (batch.empty()) throw std::invalid_argument("velocity loss: empty batch");
  const auto counts = count_components(batch, m.feat.dim);
  Expr pos{}, lat{};
  for (const auto& it : batch) {
    Expr ps = item_pos_sse(tape, m, it);
    Expr ls = item_lat_sse(tape, m, it);
    pos = pos.valid() ? tape.add(pos, ps) : ps;
    lat = lat.valid() ? tape.add(lat, ls) : ls;
  }
  return tape.add(tape.scale(w_pos / counts.pos_components, pos),
                  tape.scale(w_lat / counts.lat_components, lat));
}

double loss_b(const dyn::SIModel& m, const std::vector<BatchItem>& batch,
              double w_pos, double w_lat) {
  Tape tape(m.params);
  return tape.value_scalar(velocity_loss_tape(tape, m, batch, w_pos, w_lat));
}

Expr denoiser_loss_tape(Tape& tape, const dyn::SIModel& m,
                        const std::vector<BatchItem>& batch) {
  if (batch.empty()) throw std::invalid_argument("denoiser loss: empty batch");
  if (!m.with_denoiser || !m.schedule.has_gamma())
    throw std::invalid_argument(
        "denoiser loss requires a denoiser head and a gamma schedule");
  const auto counts = count_components(batch, m.feat.dim);
  Expr acc{};
  for (const auto& it : batch) {
    if (it.z_pos.empty())
      throw std::invalid_argument("denoiser loss: batch item carries no z");
    Expr zs = item_z_sse(tape, m, it);
    acc = acc.valid() ? tape.add(acc, zs) : zs;
  }
  return tape.scale(1.0 / counts.pos_components, acc);
}

double loss_z(const dyn::SIModel& m, const std::vector<BatchItem>& batch) {
  Tape tape(m.params);
  return tape.value_scalar(denoiser_loss_tape(tape, m, batch));
}

std::vector<BatchItem> assemble_batch(const PretrainConfig& cfg,
                                      const world::EnergyModelParams& wp,
                                      const world::ReferenceSet& refs,
                                      int batch_size, CounterRng rng) {
  std::vector<const world::RefEntry*> train;
  for (const auto& e : refs.entries)
    if (e.split == world::Split::Train) train.push_back(&e);
  if (train.empty()) throw std::runtime_error("assemble_batch: empty train split");

  const double t_lo = cfg.schedule.has_gamma() ? cfg.t_min : 0.0;
  std::vector<BatchItem> batch(static_cast<std::size_t>(batch_size));
  par::parallel_for(batch_size, [&](std::int64_t bi) {
    CounterRng r = rng.stream(std::uint64_t(bi));
    const auto* entry = train[std::size_t(r.uniform_int(std::int64_t(train.size())))];
    const double t = r.uniform(t_lo, 1.0 - t_lo);
    CounterRng base_rng = r.stream(1);
    const double mu = world::cell_log_mean(entry->comp, wp, cfg.base, cfg.feat.dim);
    world::ToyStructure x0 = world::sample_base(entry->comp, mu, cfg.base.sigma_log,
                                                cfg.feat.dim, base_rng);
    std::vector<double> z;
    if (cfg.schedule.has_gamma()) {
      CounterRng zr = r.stream(2);
      z.resize(std::size_t(entry->comp.n() * cfg.feat.dim));
      for (double& v : z) v = zr.normal();
    }
    batch[std::size_t(bi)] =
        make_batch_item(cfg.schedule, t, x0, entry->structure, z);
  });
  return batch;
}

ValMetrics validate_model(const dyn::SIModel& m,
                          const world::EnergyModelParams& wp,
                          const world::ReferenceSet& refs, world::Split split,
                          int n_t, int max_comps,
                          const evalm::MatcherTolerances& tol,
                          const world::ValidityThresholds& vt,
                          std::uint64_t seed) {
  dyn::Policy policy;
  policy.model = m;
  policy.mode = dyn::Mode::DeterministicODE;

  std::vector<int> comps = refs.comp_indices(split);
  if (max_comps > 0 && int(comps.size()) > max_comps)
    comps.resize(std::size_t(max_comps));
  std::vector<evalm::GeneratedSample> gen(comps.size());
  CounterRng master(seed);
  par::parallel_for(std::int64_t(comps.size()), [&](std::int64_t i) {
    const int ci = comps[std::size_t(i)];
    auto traj = dyn::rollout(policy, refs.composition(ci), wp, n_t,
                             master.stream(std::uint64_t(ci)), false);
    gen[std::size_t(i)] = {ci, std::move(traj.terminal)};
  });

  ValMetrics v;
  auto [rel, inv] = evalm::energy_stats(gen, refs, wp, vt);
  v.mean_rel_energy = rel;
  v.invalid_rate = inv;
  auto [mr, rmse] = evalm::match_rate(gen, refs, split, tol);
  (void)rmse;
  v.match_rate = mr;
  return v;
}

PretrainResult pretrain_loop(const PretrainConfig& cfg,
                             const world::EnergyModelParams& wp,
                             const world::ReferenceSet& refs) {
  dyn::SIModel model = dyn::make_model(cfg.feat, cfg.schedule, cfg.base,
                                       cfg.pos_hidden, cfg.lat_hidden,
                                       cfg.with_denoiser, cfg.seed);
  diffnet::AdamState adam = diffnet::AdamState::init(model.param_count(), cfg.lr);
  CounterRng master(cfg.seed);

  const evalm::MatcherTolerances tol{0.5, 0.3, cfg.feat.n_max};
  const auto vt = world::ValidityThresholds::defaults(wp);

  PretrainResult res;
  res.best_val_energy = std::numeric_limits<double>::infinity();
  res.best_model = model;

  for (int step = 0; step < cfg.steps; ++step) {
    auto batch = assemble_batch(cfg, wp, refs, cfg.batch_size,
                                master.stream(0xba7c4, std::uint64_t(step)));
    const auto counts = count_components(batch, cfg.feat.dim);

    auto [loss, grad] = par::sum_value_grads(
        std::int64_t(batch.size()), std::size_t(model.param_count()),
        [&](std::int64_t bi) {
          const BatchItem& it = batch[std::size_t(bi)];
          Tape tape(model.params);
          Expr obj = tape.add(
              tape.scale(cfg.loss_weight_pos / counts.pos_components,
                         item_pos_sse(tape, model, it)),
              tape.scale(cfg.loss_weight_lat / counts.lat_components,
                         item_lat_sse(tape, model, it)));
          if (cfg.with_denoiser)
            obj = tape.add(obj, tape.scale(1.0 / counts.pos_components,
                                           item_z_sse(tape, model, it)));
          std::vector<double> g(std::size_t(model.param_count()), 0.0);
          tape.backward(obj, g);
          return std::pair<double, std::vector<double>>(tape.value_scalar(obj),
                                                        std::move(g));
        });
    diffnet::adam_step(adam, model.params, grad);

    nlohmann::json row{{"step", step}, {"loss", loss}};
    const bool last = step == cfg.steps - 1;
    if ((step + 1) % cfg.val_every == 0 || last) {
      ValMetrics v = validate_model(model, wp, refs, world::Split::Val,
                                    cfg.val_n_t, cfg.val_max_comps, tol, vt,
                                    master.stream(0x7a1).next_u64());
      row["val_mean_rel_energy"] = v.mean_rel_energy;
      row["val_invalid_rate"] = v.invalid_rate;
      row["val_match_rate"] = v.match_rate;
      if (v.mean_rel_energy < res.best_val_energy) {
        res.best_val_energy = v.mean_rel_energy;
        res.best_model = model;
      }
    }
    res.log.push_back(std::move(row));
  }
  res.final_model = std::move(model);
  return res;
}

}  // namespace flowrl::pretrain
