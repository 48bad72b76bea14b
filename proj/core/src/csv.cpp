#include "calens/csv.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "calens/errors.hpp"

namespace calens {

namespace {

std::vector<std::string> split_comma(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

double parse_double(const std::string& cell, long line_no) {
  if (cell.empty()) throw ParseError("empty cell", line_no);
  char* end = nullptr;
  const double v = std::strtod(cell.c_str(), &end);
  if (end != cell.c_str() + cell.size()) {
    throw ParseError("non-numeric cell '" + cell + "'", line_no);
  }
  return v;
}

struct RawTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
  std::string generator;
  std::uint64_t seed = 0;
};

RawTable read_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  RawTable t;
  std::string line;
  long line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (eq != std::string::npos) {
        std::string key = line.substr(1, eq - 1);
        std::string value = line.substr(eq + 1);
        while (!key.empty() && key.front() == ' ') key.erase(key.begin());
        while (!key.empty() && key.back() == ' ') key.pop_back();
        if (key == "generator") t.generator = value;
        if (key == "seed") t.seed = std::strtoull(value.c_str(), nullptr, 10);
      }
      continue;
    }
    if (!have_header) {
      t.header = split_comma(line);
      have_header = true;
      continue;
    }
    const std::vector<std::string> cells = split_comma(line);
    if (cells.size() != t.header.size()) {
      throw ParseError("row has " + std::to_string(cells.size()) + " cells, header has " +
                           std::to_string(t.header.size()),
                       line_no);
    }
    std::vector<double> row;
    row.reserve(cells.size());
    for (const std::string& c : cells) row.push_back(parse_double(c, line_no));
    t.rows.push_back(std::move(row));
  }
  if (!have_header) throw ParseError("missing header in '" + path + "'");
  if (t.rows.empty()) throw ParseError("no rows in '" + path + "'");
  return t;
}

int find_column(const RawTable& t, const std::string& name) {
  for (size_t c = 0; c < t.header.size(); ++c) {
    if (t.header[c] == name) return static_cast<int>(c);
  }
  return -1;
}

}  // namespace

std::string format_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void save_dataset(const Dataset& ds, const std::string& path) {
  validate_dataset(ds);
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "# generator=" << ds.generator << "\n";
  out << "# seed=" << ds.seed << "\n";
  out << (ds.dim() == 2 ? "x1,x2,y" : "x1,y") << "\n";
  for (Eigen::Index i = 0; i < ds.size(); ++i) {
    out << format_g17(ds.inputs(i, 0));
    if (ds.dim() == 2) out << ',' << format_g17(ds.inputs(i, 1));
    out << ',' << format_g17(ds.targets[i]) << "\n";
  }
}

Dataset load_dataset(const std::string& path) {
  const RawTable t = read_table(path);
  const int cx1 = find_column(t, "x1");
  const int cx2 = find_column(t, "x2");
  const int cy = find_column(t, "y");
  if (cx1 < 0) throw ParseError("missing column 'x1' in '" + path + "'");
  if (cy < 0) throw ParseError("missing column 'y' in '" + path + "'");
  for (const std::string& name : t.header) {
    if (name != "x1" && name != "x2" && name != "y") {
      throw ParseError("unexpected column '" + name + "' in '" + path + "'");
    }
  }
  Dataset ds;
  const Eigen::Index n = static_cast<Eigen::Index>(t.rows.size());
  const Eigen::Index d = cx2 >= 0 ? 2 : 1;
  ds.inputs.resize(n, d);
  ds.targets.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    ds.inputs(i, 0) = t.rows[i][cx1];
    if (d == 2) ds.inputs(i, 1) = t.rows[i][cx2];
    ds.targets[i] = t.rows[i][cy];
  }
  ds.generator = t.generator;
  ds.seed = t.seed;
  validate_dataset(ds);
  return ds;
}

void save_base_predictions(const Dataset& ds, const std::string& path) {
  validate_dataset(ds);
  if (!ds.base_predictions) throw InputError("save_base_predictions: dataset has no predictions");
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "# generator=" << ds.generator << "\n";
  out << "# seed=" << ds.seed << "\n";
  out << (ds.dim() == 2 ? "x1,x2" : "x1");
  for (const std::string& name : ds.base_names) out << ",pred_" << name;
  out << "\n";
  for (Eigen::Index i = 0; i < ds.size(); ++i) {
    out << format_g17(ds.inputs(i, 0));
    if (ds.dim() == 2) out << ',' << format_g17(ds.inputs(i, 1));
    for (Eigen::Index k = 0; k < ds.base_predictions->cols(); ++k) {
      out << ',' << format_g17((*ds.base_predictions)(i, k));
    }
    out << "\n";
  }
}

Dataset load_base_predictions(const std::string& path) {
  const RawTable t = read_table(path);
  const int cx1 = find_column(t, "x1");
  const int cx2 = find_column(t, "x2");
  if (cx1 < 0) throw ParseError("missing column 'x1' in '" + path + "'");
  std::vector<int> pred_cols;
  std::vector<std::string> names;
  for (size_t c = 0; c < t.header.size(); ++c) {
    const std::string& name = t.header[c];
    if (name == "x1" || name == "x2") continue;
    if (name.rfind("pred_", 0) == 0) {
      pred_cols.push_back(static_cast<int>(c));
      names.push_back(name.substr(5));
    } else {
      throw ParseError("unexpected column '" + name + "' in '" + path + "'");
    }
  }
  if (pred_cols.empty()) throw ParseError("no pred_<name> columns in '" + path + "'");
  Dataset ds;
  const Eigen::Index n = static_cast<Eigen::Index>(t.rows.size());
  const Eigen::Index d = cx2 >= 0 ? 2 : 1;
  ds.inputs.resize(n, d);
  Eigen::MatrixXd preds(n, static_cast<Eigen::Index>(pred_cols.size()));
  for (Eigen::Index i = 0; i < n; ++i) {
    ds.inputs(i, 0) = t.rows[i][cx1];
    if (d == 2) ds.inputs(i, 1) = t.rows[i][cx2];
    for (size_t k = 0; k < pred_cols.size(); ++k) {
      preds(i, static_cast<Eigen::Index>(k)) = t.rows[i][pred_cols[k]];
    }
  }
  ds.base_predictions = preds;
  ds.base_names = names;
  ds.generator = t.generator;
  ds.seed = t.seed;
  return ds;
}

void attach_base_predictions(Dataset& ds, const Dataset& preds) {
  if (!preds.base_predictions) throw InputError("attach_base_predictions: no predictions");
  if (preds.inputs.rows() != ds.inputs.rows() || preds.inputs.cols() != ds.inputs.cols() ||
      (preds.inputs - ds.inputs).cwiseAbs().maxCoeff() > 0.0) {
    throw InputError("attach_base_predictions: locations disagree with the observations");
  }
  ds.base_predictions = preds.base_predictions;
  ds.base_names = preds.base_names;
}

void write_report_csv(const std::string& path, const std::vector<ReportRow>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "metric,level,value,method,replication\n";
  for (const ReportRow& r : rows) {
    out << r.metric << ',';
    if (r.level) out << format_g17(*r.level);
    out << ',' << format_g17(r.value) << ',' << r.method << ',' << r.replication << "\n";
  }
}

}  // namespace calens
