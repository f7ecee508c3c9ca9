#pragma once

#include <memory>
#include <string>
#include <vector>

#include "alws/common.hpp"

namespace alws {

// Describes how a flat parameter vector decomposes into named matrices.
// Slices are stored back to back, column-major within each slice.
class ParamLayout {
 public:
  struct Slice {
    std::string name;
    int rows = 0;
    int cols = 0;
    int offset = 0;
    int size() const { return rows * cols; }
  };

  // Returns the new slice's offset.
  int add(const std::string& name, int rows, int cols = 1);

  const Slice& slice(const std::string& name) const;
  bool has(const std::string& name) const;
  const std::vector<Slice>& slices() const { return slices_; }
  int total_size() const { return total_; }

 private:
  std::vector<Slice> slices_;
  int total_ = 0;
};

// A flat parameter vector plus the layout that names its pieces. Models
// treat this as theta; the latent-inference oracle reuses it for z.
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(std::shared_ptr<const ParamLayout> layout);

  const ParamLayout& layout() const { return *layout_; }
  std::shared_ptr<const ParamLayout> layout_ptr() const { return layout_; }

  Vec& data() { return data_; }
  const Vec& data() const { return data_; }
  int size() const { return static_cast<int>(data_.size()); }

  // Copy of the named slice, reshaped to its declared rows x cols.
  Mat matrix(const std::string& name) const;
  Vec vector(const std::string& name) const;
  double scalar(const std::string& name) const;

  void set(const std::string& name, const Mat& value);
  void set_scalar(const std::string& name, double value);

  // Bit-exact round trip with matrix(): unpacks this vector into the named
  // slices and repacks them, asserting equality of layout.
  std::string to_json(const std::string& model_name = "") const;
  static ParamVector from_json(const std::string& text);

 private:
  std::shared_ptr<const ParamLayout> layout_;
  Vec data_;
};

}  // namespace alws
