#pragma once

#include <optional>
#include <string>
#include <vector>

#include "calens/dataset.hpp"

namespace calens {

// Doubles are serialized with 17 significant digits, so a save/load round
// trip is bit-exact.
std::string format_g17(double v);

// Observations file: header x1[,x2],y with optional leading
// "# key=value" metadata lines (generator, seed). Columns are name-keyed;
// any header order parses to the same Dataset.
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

// Base-prediction file: header x1[,x2],pred_<name>,...
void save_base_predictions(const Dataset& ds, const std::string& path);
Dataset load_base_predictions(const std::string& path);  // inputs + predictions only

// Copies predictions/names from `preds` into `ds` after checking the
// locations match exactly.
void attach_base_predictions(Dataset& ds, const Dataset& preds);

// Report file: header metric,level,value,method,replication.
struct ReportRow {
  std::string metric;
  std::optional<double> level;
  double value = 0.0;
  std::string method;
  int replication = 0;
};
void write_report_csv(const std::string& path, const std::vector<ReportRow>& rows);

}  // namespace calens
