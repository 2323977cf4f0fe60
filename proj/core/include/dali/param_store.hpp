#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dali/tensor.hpp"

namespace dali::num {

inline constexpr char kCheckpointMagic[] = "DALI-CKPT1";

struct AdamWOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Ordered name -> trainable tensor map carrying AdamW moments, per-parameter
/// step counts and an EMA shadow of every parameter.
class ParamStore {
 public:
  /// Registers a new trainable parameter. The EMA shadow starts as a copy.
  Tensor& add(const std::string& name, Tensor init);
  /// Returns the existing parameter or registers the one produced by `init`.
  Tensor& get_or_add(const std::string& name, const Shape& shape,
                     const std::function<Tensor()>& init);

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  const std::vector<std::string>& names() const { return order_; }
  std::size_t size() const { return order_.size(); }
  std::int64_t parameter_count() const;

  const Tensor& ema(const std::string& name) const;
  const Tensor& first_moment(const std::string& name) const;
  const Tensor& second_moment(const std::string& name) const;
  std::int64_t step(const std::string& name) const;

  void zero_grad();

  /// Deep copy of values, optimizer state and EMA.
  ParamStore clone() const;
  /// Deep copy whose parameter values are this store's EMA shadows.
  ParamStore ema_snapshot() const;
  /// Overwrites values (not optimizer state) from a store with identical names and shapes.
  void copy_values_from(const ParamStore& other);

  friend void adamw_step(ParamStore& store, const AdamWOptions& opt);
  friend void ema_update(ParamStore& store, double decay);
  friend void save_checkpoint(const ParamStore& store, const std::filesystem::path& path,
                              const std::string& header_json);
  friend ParamStore load_checkpoint(const std::filesystem::path& path, std::string* header_json);

 private:
  struct Entry {
    Tensor value;
    Tensor m;
    Tensor v;
    Tensor ema;
    std::int64_t step = 0;
  };
  Entry& entry(const std::string& name);
  const Entry& entry(const std::string& name) const;

  std::vector<std::string> order_;
  std::map<std::string, Entry> entries_;
};

/// Decoupled weight decay with bias-corrected moments. Throws if any
/// parameter has no gradient.
void adamw_step(ParamStore& store, const AdamWOptions& opt);

/// shadow <- decay * shadow + (1 - decay) * param. decay must lie in [0, 1].
void ema_update(ParamStore& store, double decay);

/// Writes a DALI-CKPT1 file. `header_json` is stored verbatim (must be JSON).
void save_checkpoint(const ParamStore& store, const std::filesystem::path& path,
                     const std::string& header_json = "{}");
ParamStore load_checkpoint(const std::filesystem::path& path, std::string* header_json = nullptr);

/// Copies parameters from `external` into `target` through an explicit
/// name map (target name -> external name). Every target parameter needs an
/// entry and a matching shape.
void import_weights(ParamStore& target, const ParamStore& external,
                    const std::map<std::string, std::string>& name_map);

/// Compares reverse-mode gradients of scalar `f` against central finite
/// differences over every coordinate of `params`. Returns
/// max |g_ad - g_fd| / max(1, |g_fd|). Requires f64 tensors.
double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                  double eps = 1e-6);

}  // namespace dali::num
