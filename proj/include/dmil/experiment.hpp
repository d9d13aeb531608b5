#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <future>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "dmil/evaluation.hpp"
#include "dmil/synthdata.hpp"
#include "dmil/training.hpp"

namespace dmil {

inline constexpr double kFrocReportFppi = 0.5;
inline constexpr double kClassificationOperatingPoint = 0.85;

struct EvalReport {
  TaskMetrics mvsbn;
  TaskMetrics mbvsn;
  EvalCurve froc_m, froc_b;                    // every image
  EvalCurve froc_m_at_op, froc_b_at_op;        // images flagged at 0.85 sensitivity
  double froc_m_sens_at_fppi = 0.0;            // unfiltered, FPPI <= 0.5
  double froc_b_sens_at_fppi = 0.0;
  std::vector<ScoredImage> scored;
};

inline bool has_class(std::span<const ScoredImage> set, LesionClass cls) {
  for (const auto& s : set)
    for (const auto& a : s.annotations)
      if (a.cls == cls) return true;
  return false;
}

inline EvalReport evaluate(const ModelParams& params, std::span<const RegionBag> bags) {
  EvalReport r;
  r.scored = score_dataset(bags, params);
  r.mvsbn = task_metrics(r.scored, Task::MvsBN);
  r.mbvsn = task_metrics(r.scored, Task::MBvsN);
  if (has_class(r.scored, LesionClass::M)) {
    r.froc_m = froc(r.scored, LesionClass::M);
    r.froc_m_sens_at_fppi = sensitivity_at_fppi(r.froc_m, kFrocReportFppi);
    FrocOptions op;
    op.include = flagged_at_sensitivity(r.scored, LesionClass::M, kClassificationOperatingPoint);
    r.froc_m_at_op = froc(r.scored, LesionClass::M, op);
  }
  if (has_class(r.scored, LesionClass::B)) {
    r.froc_b = froc(r.scored, LesionClass::B);
    r.froc_b_sens_at_fppi = sensitivity_at_fppi(r.froc_b, kFrocReportFppi);
    FrocOptions op;
    op.include = flagged_at_sensitivity(r.scored, LesionClass::B, kClassificationOperatingPoint);
    r.froc_b_at_op = froc(r.scored, LesionClass::B, op);
  }
  return r;
}

inline std::string fmt(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

inline void write_report_text(std::ostream& os, const EvalReport& r) {
  os << "task    AUROC   pAUCR   spec@0.85  spec@0.90\n";
  for (auto [name, m] : {std::pair{"MvsBN", &r.mvsbn}, std::pair{"MBvsN", &r.mbvsn}})
    os << name << "   " << fmt(m->auroc) << "  " << fmt(m->paucr) << "  " << fmt(m->spec_at_085)
       << "     " << fmt(m->spec_at_090) << '\n';
  os << "FROC sensitivity at FPPI<=" << fmt(kFrocReportFppi, 1) << ": M " << fmt(r.froc_m_sens_at_fppi)
     << "  B " << fmt(r.froc_b_sens_at_fppi) << '\n';
  os << "FROC sensitivity at FPPI<=" << fmt(kFrocReportFppi, 1) << " (classifier OP 0.85): M "
     << fmt(sensitivity_at_fppi(r.froc_m_at_op, kFrocReportFppi)) << "  B "
     << fmt(sensitivity_at_fppi(r.froc_b_at_op, kFrocReportFppi)) << '\n';
}

inline void write_report_csv(std::ostream& os, const EvalReport& r) {
  os << "task,auroc,paucr,spec_at_0.85,spec_at_0.90\n";
  for (auto [name, m] : {std::pair{"MvsBN", &r.mvsbn}, std::pair{"MBvsN", &r.mbvsn}})
    os << name << ',' << format_double(m->auroc) << ',' << format_double(m->paucr) << ','
       << format_double(m->spec_at_085) << ',' << format_double(m->spec_at_090) << '\n';
  os << "froc_M_sens_at_fppi_0.5," << format_double(r.froc_m_sens_at_fppi) << ",,,\n";
  os << "froc_B_sens_at_fppi_0.5," << format_double(r.froc_b_sens_at_fppi) << ",,,\n";
}

inline const std::vector<double> kDefaultSweepRatios = {0.0, 0.25, 0.5, 0.75, 1.0};

struct SweepRow {
  Variant variant = Variant::ClsDetRS;
  double ratio = 0.0;
  std::uint64_t seed = 0;
  double auroc = 0.0;  // M vs BN
  double paucr = 0.0;
  double spec_085 = 0.0;
  double spec_090 = 0.0;
  double froc_sens = 0.0;  // M, FPPI <= 0.5
};

// One training at a given annotation ratio, evaluated on the M vs BN task.
inline SweepRow run_one(std::span<const RegionBag> train_bags, std::span<const RegionBag> test_bags,
                        TrainConfig config, double ratio) {
  std::vector<RegionBag> bags = subsample_full({train_bags.begin(), train_bags.end()}, ratio,
                                               config.seed);
  const TrainResult tr = train(bags, config);
  const EvalReport ev = evaluate(tr.params, test_bags);
  return {config.variant,    ratio,           config.seed,         ev.mvsbn.auroc,
          ev.mvsbn.paucr,    ev.mvsbn.spec_at_085, ev.mvsbn.spec_at_090, ev.froc_m_sens_at_fppi};
}

// Rows come out ordered by (variant, ratio, seed) whatever the thread count.
inline std::vector<SweepRow> run_sweep(std::span<const RegionBag> train_bags,
                                       std::span<const RegionBag> test_bags,
                                       const TrainConfig& base, std::span<const Variant> variants,
                                       std::span<const double> ratios,
                                       std::span<const std::uint64_t> seeds, unsigned threads = 1) {
  struct Job {
    TrainConfig config;
    double ratio;
  };
  std::vector<Job> jobs;
  for (Variant v : variants)
    for (double r : ratios)
      for (std::uint64_t s : seeds) {
        TrainConfig c = base;
        c.variant = v;
        c.seed = s;
        jobs.push_back({c, r});
      }
  std::vector<SweepRow> rows(jobs.size());
  if (threads <= 1) {
    for (std::size_t i = 0; i < jobs.size(); ++i)
      rows[i] = run_one(train_bags, test_bags, jobs[i].config, jobs[i].ratio);
    return rows;
  }
  for (std::size_t start = 0; start < jobs.size(); start += threads) {
    std::vector<std::future<SweepRow>> running;
    for (std::size_t i = start; i < std::min(jobs.size(), start + threads); ++i)
      running.push_back(std::async(std::launch::async, [&, i] {
        return run_one(train_bags, test_bags, jobs[i].config, jobs[i].ratio);
      }));
    for (std::size_t i = 0; i < running.size(); ++i) rows[start + i] = running[i].get();
  }
  return rows;
}

inline void write_sweep_csv(std::ostream& os, std::span<const SweepRow> rows) {
  os << "variant,ratio,seed,auroc,paucr,spec_at_0.85,spec_at_0.90,froc_sens_at_fppi_0.5\n";
  for (const auto& r : rows)
    os << to_string(r.variant) << ',' << format_double(r.ratio) << ',' << r.seed << ','
       << format_double(r.auroc) << ',' << format_double(r.paucr) << ','
       << format_double(r.spec_085) << ',' << format_double(r.spec_090) << ','
       << format_double(r.froc_sens) << '\n';
}

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
  std::size_t n = 0;
};

inline MeanSe mean_se(std::span<const double> v) {
  MeanSe out;
  out.n = v.size();
  if (v.empty()) return out;
  for (double x : v) out.mean += x;
  out.mean /= double(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - out.mean) * (x - out.mean);
    out.se = std::sqrt(ss / double(v.size() - 1) / double(v.size()));
  }
  return out;
}

// Standard error of a difference of two independent means.
inline double pooled_se(const MeanSe& a, const MeanSe& b) {
  return std::sqrt(a.se * a.se + b.se * b.se);
}

}  // namespace dmil
