#pragma once

// Renderers for reports: JSON, plain-text tables and CSV.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cfsim/metrics.hpp"

namespace cfsim {

// Two-decimal rendering used in every table; an empty value renders "—".
std::string fixed2(std::optional<double> v);

json report_json(const EvalReport& r);
std::string report_table(const EvalReport& r);
// One row per SampleScore.
std::string report_csv(const EvalReport& r);

json kappa_json(std::span<const KappaCell> cells);
// Square matrix over every annotator in `cells`; "-" on the diagonal.
std::string kappa_table(std::span<const KappaCell> cells);

json audit_json(const AuditSummary& s);
std::string audit_table(const AuditSummary& s, TaskKind task);

struct SweepRow {
  int k = 0;
  std::optional<double> generality;  // empty: excluded (fewer than two cfs)
  std::size_t simulatable = 0;
  std::size_t generated = 0;
  std::optional<std::string> error;
};

// Columns are k values; rows are generality, simulatable and total
// generated counterfactuals.
std::string sweep_table(std::span<const SweepRow> rows);
json sweep_json(std::span<const SweepRow> rows);

}  // namespace cfsim
