#pragma once

#include "dpaclab/analytics.hpp"
#include "dpaclab/config.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dpaclab {

struct NamedSeries {
  std::string name;
  std::string x_label = "x";
  std::string y_label = "y";
  Series data;
};

struct ExperimentReport {
  std::string name;
  ExperimentConfig config;
  std::vector<std::pair<std::string, double>> scalars;
  std::vector<NamedSeries> series;
  std::vector<BoundCheck> bound_checks;
  std::vector<std::pair<std::string, std::string>> estimator_labels;

  void set(const std::string& key, double value) {
    if (!std::isfinite(value)) throw NumericError("report scalar '" + key + "' is not finite");
    for (auto& kv : scalars) {
      if (kv.first == key) {
        kv.second = value;
        return;
      }
    }
    scalars.emplace_back(key, value);
  }

  void set(const std::string& key, double value, EnergyEstimator est) {
    set(key, value);
    for (auto& kv : estimator_labels) {
      if (kv.first == key) {
        kv.second = estimator_name(est);
        return;
      }
    }
    estimator_labels.emplace_back(key, estimator_name(est));
  }

  bool has(const std::string& key) const {
    for (const auto& kv : scalars) {
      if (kv.first == key) return true;
    }
    return false;
  }

  double scalar(const std::string& key) const {
    for (const auto& kv : scalars) {
      if (kv.first == key) return kv.second;
    }
    throw std::out_of_range("report has no scalar '" + key + "'");
  }

  const NamedSeries& get_series(const std::string& key) const {
    for (const auto& s : series) {
      if (s.name == key) return s;
    }
    throw std::out_of_range("report has no series '" + key + "'");
  }

  const BoundCheck& check(const std::string& key) const {
    for (const auto& c : bound_checks) {
      if (c.name == key) return c;
    }
    throw std::out_of_range("report has no bound check '" + key + "'");
  }

  void add_series(std::string key, std::string xl, std::string yl, Series data) {
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (!std::isfinite(data.x[i]) || !std::isfinite(data.y[i])) throw NumericError("series '" + key + "' is not finite");
    }
    series.push_back({std::move(key), std::move(xl), std::move(yl), std::move(data)});
  }

  void add_check(BoundCheck c) { bound_checks.push_back(std::move(c)); }

  bool all_bounds_satisfied() const {
    for (const auto& c : bound_checks) {
      if (!c.skipped && !c.satisfied) return false;
    }
    return true;
  }
};

// ---------------------------------------------------------------------------
// JSON writer with fixed formatting
// ---------------------------------------------------------------------------

inline std::string format_double(double v, int digits = 17) {
  if (!std::isfinite(v)) throw NumericError("cannot serialize a non-finite value");
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  std::string s(buf);
  // Keep numbers recognizable as floating point.
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

inline std::string json_quote(const std::string& s) { return nlohmann::json(s).dump(); }

class JsonWriter {
 public:
  std::string str() const { return out_.str(); }

  void begin_object() { open('{'); }
  void end_object() { close('}'); }
  void begin_array() { open('['); }
  void end_array() { close(']'); }

  void key(const std::string& k) {
    separator();
    out_ << json_quote(k) << ": ";
    after_key_ = true;
  }
  void value(double v) { scalar(format_double(v)); }
  void value(int v) { scalar(std::to_string(v)); }
  void value(std::uint64_t v) { scalar(std::to_string(v)); }
  void value(bool v) { scalar(v ? "true" : "false"); }
  void value(const std::string& v) { scalar(json_quote(v)); }
  void value(const char* v) { scalar(json_quote(v)); }
  void null() { scalar("null"); }

  void numbers(const std::vector<double>& v) {
    begin_array_inline();
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i) out_ << ", ";
      out_ << format_double(v[i]);
    }
    out_ << "]";
  }
  void matrix(const std::vector<std::vector<double>>& m) {
    begin_array();
    for (const auto& row : m) {
      separator();
      after_key_ = true;
      numbers(row);
    }
    end_array();
  }

 private:
  void begin_array_inline() {
    if (!after_key_) separator();
    after_key_ = false;
    out_ << "[";
  }
  void open(char c) {
    if (!after_key_) separator();
    after_key_ = false;
    out_ << c;
    first_.push_back(true);
  }
  void close(char c) {
    const bool empty = first_.back();
    first_.pop_back();
    if (!empty) {
      out_ << "\n";
      indent();
    }
    out_ << c;
    if (first_.empty()) out_ << "\n";
  }
  void scalar(const std::string& s) {
    if (!after_key_) separator();
    after_key_ = false;
    out_ << s;
  }
  void separator() {
    if (first_.empty() || after_key_) return;
    if (!first_.back()) out_ << ",";
    first_.back() = false;
    out_ << "\n";
    indent();
  }
  void indent() {
    for (std::size_t i = 0; i < first_.size(); ++i) out_ << "  ";
  }

  std::ostringstream out_;
  std::vector<bool> first_;
  bool after_key_ = false;
};

inline void write_config(JsonWriter& w, const ExperimentConfig& c) {
  w.begin_object();
  w.key("name"); w.value(c.name);
  w.key("seed"); w.value(c.seed);
  w.key("seeds");
  w.begin_array();
  for (auto s : c.seeds) w.value(s);
  w.end_array();
  w.key("N"); w.value(c.N);
  w.key("K"); w.value(c.K);
  w.key("t_min"); w.value(c.t_min);
  w.key("dimension"); w.value(c.dimension);
  w.key("fine_steps"); w.value(c.fine_steps);
  w.key("density");
  w.begin_object();
  w.key("type"); w.value(c.density.type);
  w.key("weights"); w.numbers(c.density.weights);
  w.key("means"); w.matrix(c.density.means);
  w.key("covariances");
  w.begin_array();
  for (const auto& m : c.density.covariances) w.matrix(m);
  w.end_array();
  w.key("diffusion"); w.value(c.density.diffusion);
  w.key("rate"); w.value(c.density.rate);
  w.key("horizon"); w.value(c.density.horizon);
  w.key("initial_mean"); w.numbers(c.density.initial_mean);
  w.key("initial_covariance"); w.matrix(c.density.initial_covariance);
  w.end_object();
  w.key("control");
  w.begin_object();
  w.key("kind"); w.value(c.control.kind);
  w.key("magnitude"); w.value(c.control.magnitude);
  w.key("normalize"); w.value(c.control.normalize);
  w.key("logistic");
  if (c.control.logistic) {
    w.begin_object();
    w.key("weight"); w.numbers(c.control.logistic->weight);
    w.key("bias"); w.value(c.control.logistic->bias);
    w.key("target_sign"); w.value(c.control.logistic->target_sign);
    w.end_object();
  } else {
    w.null();
  }
  w.end_object();
  w.key("metric");
  w.begin_object();
  w.key("kind"); w.value(c.metric.kind);
  w.key("matrix"); w.matrix(c.metric.matrix);
  w.end_object();
  w.key("schedule");
  w.begin_object();
  w.key("kind"); w.value(c.schedule.kind);
  w.key("window_fraction"); w.value(c.schedule.window_fraction);
  w.key("eta_max"); w.value(c.schedule.eta_max);
  w.end_object();
  w.key("sweep"); w.numbers(c.sweep);
  w.key("output_dir"); w.value(c.output_dir);
  w.end_object();
}

inline std::string config_to_json(const ExperimentConfig& c) {
  JsonWriter w;
  write_config(w, c);
  return w.str();
}

/// Canonical report document: name, config, scalars, series, bound_checks,
/// estimator_labels, in that order; floats with 17 significant digits.
inline std::string report_to_json(const ExperimentReport& r) {
  JsonWriter w;
  w.begin_object();
  w.key("name"); w.value(r.name);
  w.key("config"); write_config(w, r.config);
  w.key("scalars");
  w.begin_object();
  for (const auto& [k, v] : r.scalars) {
    w.key(k);
    w.value(v);
  }
  w.end_object();
  w.key("series");
  w.begin_object();
  for (const auto& s : r.series) {
    w.key(s.name);
    w.begin_object();
    w.key("x_label"); w.value(s.x_label);
    w.key("y_label"); w.value(s.y_label);
    w.key("x"); w.numbers(s.data.x);
    w.key("y"); w.numbers(s.data.y);
    w.end_object();
  }
  w.end_object();
  w.key("bound_checks");
  w.begin_array();
  for (const auto& c : r.bound_checks) {
    w.begin_object();
    w.key("name"); w.value(c.name);
    w.key("lhs"); w.value(c.lhs);
    w.key("rhs"); w.value(c.rhs);
    w.key("slack"); w.value(c.slack);
    w.key("satisfied"); w.value(c.satisfied);
    w.key("skipped"); w.value(c.skipped);
    w.end_object();
  }
  w.end_array();
  w.key("estimator_labels");
  w.begin_object();
  for (const auto& [k, v] : r.estimator_labels) {
    w.key(k);
    w.value(v);
  }
  w.end_object();
  w.end_object();
  return w.str();
}

inline ExperimentReport report_from_json(const std::string& text) {
  using json = nlohmann::ordered_json;
  const json j = json::parse(text);
  ExperimentReport r;
  r.name = j.at("name").get<std::string>();
  r.config = parse_config(j.at("config").dump());
  for (auto it = j.at("scalars").begin(); it != j.at("scalars").end(); ++it) {
    r.scalars.emplace_back(it.key(), it.value().get<double>());
  }
  for (auto it = j.at("series").begin(); it != j.at("series").end(); ++it) {
    NamedSeries s;
    s.name = it.key();
    s.x_label = it.value().at("x_label").get<std::string>();
    s.y_label = it.value().at("y_label").get<std::string>();
    s.data.x = it.value().at("x").get<std::vector<double>>();
    s.data.y = it.value().at("y").get<std::vector<double>>();
    r.series.push_back(std::move(s));
  }
  for (const auto& c : j.at("bound_checks")) {
    BoundCheck b;
    b.name = c.at("name").get<std::string>();
    b.lhs = c.at("lhs").get<double>();
    b.rhs = c.at("rhs").get<double>();
    b.slack = c.at("slack").get<double>();
    b.satisfied = c.at("satisfied").get<bool>();
    b.skipped = c.at("skipped").get<bool>();
    r.bound_checks.push_back(std::move(b));
  }
  for (auto it = j.at("estimator_labels").begin(); it != j.at("estimator_labels").end(); ++it) {
    r.estimator_labels.emplace_back(it.key(), it.value().get<std::string>());
  }
  return r;
}

// ---------------------------------------------------------------------------
// CSV and SVG
// ---------------------------------------------------------------------------

inline std::string sanitize_filename(const std::string& s) {
  std::string out;
  for (char c : s) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.') ? c : '_';
  return out;
}

inline std::string series_to_csv(const NamedSeries& s) {
  std::ostringstream out;
  out << s.x_label << "," << s.y_label << "\n";
  for (std::size_t i = 0; i < s.data.size(); ++i) {
    out << format_double(s.data.x[i], 9) << "," << format_double(s.data.y[i], 9) << "\n";
  }
  return out.str();
}

inline std::string series_to_svg(const NamedSeries& s) {
  const double W = 640, H = 420, L = 70, R = 20, T = 30, B = 50;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (s.data.size() > 0) {
    x0 = *std::min_element(s.data.x.begin(), s.data.x.end());
    x1 = *std::max_element(s.data.x.begin(), s.data.x.end());
    y0 = *std::min_element(s.data.y.begin(), s.data.y.end());
    y1 = *std::max_element(s.data.y.begin(), s.data.y.end());
  }
  if (x1 == x0) x1 = x0 + 1.0;
  if (y1 == y0) y1 = y0 + 1.0;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  std::ostringstream o;
  char buf[128];
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"420\" viewBox=\"0 0 640 420\">\n";
  o << "<rect width=\"640\" height=\"420\" fill=\"white\"/>\n";
  std::snprintf(buf, sizeof buf, "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"black\"/>\n", L, H - B, W - R, H - B);
  o << buf;
  std::snprintf(buf, sizeof buf, "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"black\"/>\n", L, T, L, H - B);
  o << buf;
  for (int i = 0; i <= 4; ++i) {
    const double fx = x0 + (x1 - x0) * i / 4.0;
    const double fy = y0 + (y1 - y0) * i / 4.0;
    std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" font-size=\"11\" text-anchor=\"middle\">%.4g</text>\n",
                  px(fx), H - B + 16, fx);
    o << buf;
    std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" font-size=\"11\" text-anchor=\"end\">%.4g</text>\n", L - 6,
                  py(fy) + 4, fy);
    o << buf;
  }
  o << "<text x=\"355\" y=\"410\" font-size=\"13\" text-anchor=\"middle\">" << s.x_label << "</text>\n";
  o << "<text x=\"16\" y=\"210\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 16 210)\">" << s.y_label
    << "</text>\n";
  o << "<text x=\"355\" y=\"20\" font-size=\"14\" text-anchor=\"middle\">" << s.name << "</text>\n";
  o << "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\"";
  for (std::size_t i = 0; i < s.data.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%s%.2f,%.2f", i ? " " : "", px(s.data.x[i]), py(s.data.y[i]));
    o << buf;
  }
  o << "\"/>\n</svg>\n";
  return o.str();
}

inline void write_text_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

inline void write_report_outputs(const ExperimentReport& r, const std::filesystem::path& dir, bool plots) {
  std::filesystem::create_directories(dir);
  write_text_file(dir / "report.json", report_to_json(r));
  for (const auto& s : r.series) {
    const std::string base = sanitize_filename(s.name);
    write_text_file(dir / (base + ".csv"), series_to_csv(s));
    if (plots) write_text_file(dir / (base + ".svg"), series_to_svg(s));
  }
}

}  // namespace dpaclab
