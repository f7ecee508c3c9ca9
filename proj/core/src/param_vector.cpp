#include "alws/param_vector.hpp"

#include <nlohmann/json.hpp>

namespace alws {

int ParamLayout::add(const std::string& name, int rows, int cols) {
  check(rows > 0 && cols > 0, "ParamLayout: slice '" + name + "' must be non-empty");
  check(!has(name), "ParamLayout: duplicate slice '" + name + "'");
  Slice s{name, rows, cols, total_};
  slices_.push_back(s);
  total_ += s.size();
  return s.offset;
}

const ParamLayout::Slice& ParamLayout::slice(const std::string& name) const {
  for (const auto& s : slices_) {
    if (s.name == name) return s;
  }
  fail("ParamLayout: no slice named '" + name + "'");
}

bool ParamLayout::has(const std::string& name) const {
  for (const auto& s : slices_) {
    if (s.name == name) return true;
  }
  return false;
}

ParamVector::ParamVector(std::shared_ptr<const ParamLayout> layout)
    : layout_(std::move(layout)) {
  check(layout_ != nullptr, "ParamVector: null layout");
  data_ = Vec::Zero(layout_->total_size());
}

Mat ParamVector::matrix(const std::string& name) const {
  const auto& s = layout_->slice(name);
  return Eigen::Map<const Mat>(data_.data() + s.offset, s.rows, s.cols);
}

Vec ParamVector::vector(const std::string& name) const {
  const auto& s = layout_->slice(name);
  check(s.cols == 1, "ParamVector: slice '" + name + "' is not a vector");
  return data_.segment(s.offset, s.rows);
}

double ParamVector::scalar(const std::string& name) const {
  const auto& s = layout_->slice(name);
  check(s.size() == 1, "ParamVector: slice '" + name + "' is not a scalar");
  return data_[s.offset];
}

void ParamVector::set(const std::string& name, const Mat& value) {
  const auto& s = layout_->slice(name);
  check(value.rows() == s.rows && value.cols() == s.cols,
        "ParamVector: shape mismatch for slice '" + name + "'");
  Eigen::Map<Mat>(data_.data() + s.offset, s.rows, s.cols) = value;
}

void ParamVector::set_scalar(const std::string& name, double value) {
  const auto& s = layout_->slice(name);
  check(s.size() == 1, "ParamVector: slice '" + name + "' is not a scalar");
  data_[s.offset] = value;
}

std::string ParamVector::to_json(const std::string& model_name) const {
  nlohmann::json j;
  if (!model_name.empty()) j["model"] = model_name;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& s : layout_->slices()) {
    nlohmann::json e;
    e["name"] = s.name;
    e["rows"] = s.rows;
    e["cols"] = s.cols;
    std::vector<double> vals(data_.data() + s.offset,
                             data_.data() + s.offset + s.size());
    e["values"] = vals;  // column-major
    entries.push_back(e);
  }
  j["entries"] = entries;
  return j.dump(2);
}

ParamVector ParamVector::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("ParamVector: bad JSON: ") + e.what());
  }
  check(j.contains("entries"), "ParamVector: JSON missing 'entries'");
  auto layout = std::make_shared<ParamLayout>();
  std::vector<std::vector<double>> values;
  for (const auto& e : j["entries"]) {
    layout->add(e.at("name").get<std::string>(), e.at("rows").get<int>(),
                e.at("cols").get<int>());
    values.push_back(e.at("values").get<std::vector<double>>());
  }
  ParamVector pv{layout};
  int k = 0;
  for (const auto& s : layout->slices()) {
    check(static_cast<int>(values[k].size()) == s.size(),
          "ParamVector: value count mismatch for slice '" + s.name + "'");
    for (int i = 0; i < s.size(); ++i) pv.data()[s.offset + i] = values[k][i];
    ++k;
  }
  return pv;
}

}  // namespace alws
