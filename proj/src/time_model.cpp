#include "jmvar/time_model.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "jmvar/csv.hpp"
#include "jmvar/error.hpp"

namespace jmvar {

namespace {

double parse_arg(std::string_view text, std::string_view prefix) {
  auto inner = text.substr(prefix.size(), text.size() - prefix.size() - 1);
  auto v = csv::parse_double(inner);
  if (!v) fail(ErrorCode::Config, "bad term '" + std::string(text) + "'");
  return *v;
}

}  // namespace

TimeTerm TimeTerm::parse(std::string_view text) {
  if (text == "intercept" || text == "1") return {TermKind::Intercept, 0.0, 0};
  if (text == "time" || text == "t") return {TermKind::Linear, 0.0, 0};
  if (text.starts_with("quad(") && text.ends_with(")"))
    return {TermKind::QuadraticCentered, parse_arg(text, "quad("), 0};
  if (text.starts_with("ns(") && text.ends_with(")")) {
    double df = parse_arg(text, "ns(");
    if (df < 1 || df != std::floor(df)) fail(ErrorCode::Config, "ns() needs a positive integer df");
    return {TermKind::NaturalSpline, 0.0, static_cast<int>(df)};
  }
  fail(ErrorCode::Config, "unknown time term '" + std::string(text) + "' (intercept, time, quad(c), ns(df))");
}

std::string TimeTerm::label() const {
  switch (kind) {
    case TermKind::Intercept: return "intercept";
    case TermKind::Linear: return "time";
    case TermKind::QuadraticCentered: return "quad(" + csv::format_double(center) + ")";
    case TermKind::NaturalSpline: return "ns(" + std::to_string(df) + ")";
  }
  return "?";
}

TimeModel::TimeModel(std::vector<TimeTerm> fixed, std::vector<TimeTerm> random)
    : fixed_(std::move(fixed)), random_(std::move(random)) {
  bool has_intercept = false;
  int n_spline = 0;
  for (std::size_t k = 0; k < fixed_.size(); ++k) {
    has_intercept = has_intercept || fixed_[k].kind == TermKind::Intercept;
    n_spline += fixed_[k].kind == TermKind::NaturalSpline;
    for (std::size_t j = 0; j < k; ++j)
      if (fixed_[j] == fixed_[k]) fail(ErrorCode::Config, "duplicate fixed term " + fixed_[k].label());
  }
  require(has_intercept, ErrorCode::Config, "fixed terms must include the intercept");
  require(n_spline <= 1, ErrorCode::Config, "at most one natural-spline term is supported");
  std::vector<int> offsets;
  for (const auto& t : fixed_) {
    offsets.push_back(n_fixed_);
    n_fixed_ += t.columns();
  }
  for (const auto& r : random_) {
    bool found = false;
    for (std::size_t k = 0; k < fixed_.size(); ++k)
      if (fixed_[k] == r) {
        for (int c = 0; c < r.columns(); ++c) random_cols_.push_back(offsets[k] + c);
        found = true;
      }
    require(found, ErrorCode::Config, "random term " + r.label() + " is not among the fixed terms");
  }
}

TimeModel TimeModel::from_json(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    fail(ErrorCode::Config, std::string("model: ") + e.what());
  }
  auto terms = [&](const char* key) {
    std::vector<TimeTerm> out;
    if (!j.contains(key)) return out;
    if (!j[key].is_array()) fail(ErrorCode::Config, std::string("model.") + key + ": expected array of term names");
    for (const auto& t : j[key]) {
      if (!t.is_string()) fail(ErrorCode::Config, std::string("model.") + key + ": expected strings");
      out.push_back(TimeTerm::parse(t.get<std::string>()));
    }
    return out;
  };
  if (!j.contains("fixed")) fail(ErrorCode::Config, "model.fixed: missing");
  return TimeModel(terms("fixed"), terms("random"));
}

std::string TimeModel::to_json() const {
  nlohmann::json j;
  j["fixed"] = nlohmann::json::array();
  j["random"] = nlohmann::json::array();
  for (const auto& t : fixed_) j["fixed"].push_back(t.label());
  for (const auto& t : random_) j["random"].push_back(t.label());
  return j.dump();
}

TimeModel TimeModel::linear() {
  std::vector<TimeTerm> terms{{TermKind::Intercept, 0, 0}, {TermKind::Linear, 0, 0}};
  return TimeModel(terms, terms);
}

TimeModel TimeModel::quadratic(double center) {
  std::vector<TimeTerm> terms{{TermKind::Intercept, 0, 0}, {TermKind::Linear, 0, 0},
                              {TermKind::QuadraticCentered, center, 0}};
  return TimeModel(terms, terms);
}

bool TimeModel::needs_bases() const noexcept {
  for (const auto& t : fixed_)
    if (t.kind == TermKind::NaturalSpline) return true;
  return false;
}

void TimeModel::fit_bases(std::span<const double> times) {
  for (const auto& t : fixed_)
    if (t.kind == TermKind::NaturalSpline) ncs_ = NaturalCubicBasis::from_data(times, t.df);
}

std::vector<std::string> TimeModel::fixed_names() const {
  std::vector<std::string> out;
  for (const auto& t : fixed_) {
    if (t.kind == TermKind::NaturalSpline) {
      for (int c = 1; c <= t.df; ++c) out.push_back("ns" + std::to_string(c));
    } else if (t.kind == TermKind::QuadraticCentered) {
      out.push_back("quad");
    } else {
      out.push_back(t.label());
    }
  }
  return out;
}

std::vector<std::string> TimeModel::random_names() const {
  auto fixed = fixed_names();
  std::vector<std::string> out;
  for (int c : random_cols_) out.push_back(fixed[c]);
  return out;
}

Eigen::VectorXd TimeModel::fixed_row(double t) const {
  Eigen::VectorXd x(n_fixed_);
  int c = 0;
  for (const auto& term : fixed_) {
    switch (term.kind) {
      case TermKind::Intercept: x[c++] = 1.0; break;
      case TermKind::Linear: x[c++] = t; break;
      case TermKind::QuadraticCentered: x[c++] = (t - term.center) * (t - term.center); break;
      case TermKind::NaturalSpline: {
        require(ncs_.has_value(), ErrorCode::InvalidArgument, "natural-spline basis not fitted");
        auto b = ncs_->eval(t);
        for (int k = 0; k < term.df; ++k) x[c++] = b[k];
        break;
      }
    }
  }
  return x;
}

Eigen::VectorXd TimeModel::random_row(double t) const {
  auto x = fixed_row(t);
  Eigen::VectorXd z(random_cols_.size());
  for (std::size_t k = 0; k < random_cols_.size(); ++k) z[k] = x[random_cols_[k]];
  return z;
}

}  // namespace jmvar
