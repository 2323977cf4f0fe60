#include "dali/param_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>

namespace dali::num {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {
constexpr const auto& kMagic = kCheckpointMagic;
constexpr std::size_t kMagicLen = sizeof(kMagic) - 1;
}  // namespace

ParamStore::Entry& ParamStore::entry(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw Error("unknown parameter '" + name + "'");
  return it->second;
}

const ParamStore::Entry& ParamStore::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw Error("unknown parameter '" + name + "'");
  return it->second;
}

Tensor& ParamStore::add(const std::string& name, Tensor init) {
  if (contains(name)) throw Error("duplicate parameter '" + name + "'");
  if (!init.defined()) throw Error("parameter '" + name + "' is undefined");
  Entry e;
  e.value = init.detach();
  e.value.set_requires_grad(true);
  e.m = Tensor::zeros(init.shape(), init.dtype());
  e.v = Tensor::zeros(init.shape(), init.dtype());
  e.ema = init.detach();
  order_.push_back(name);
  return entries_.emplace(name, std::move(e)).first->second.value;
}

Tensor& ParamStore::get_or_add(const std::string& name, const Shape& shape,
                               const std::function<Tensor()>& init) {
  if (contains(name)) {
    Tensor& t = entry(name).value;
    if (t.shape() != shape)
      throw ShapeError("parameter '" + name + "' has shape " + shape_str(t.shape()) +
                       ", expected " + shape_str(shape));
    return t;
  }
  Tensor t = init();
  if (t.shape() != shape) throw ShapeError("initialiser for '" + name + "' produced wrong shape");
  return add(name, std::move(t));
}

Tensor& ParamStore::get(const std::string& name) { return entry(name).value; }
const Tensor& ParamStore::get(const std::string& name) const { return entry(name).value; }
const Tensor& ParamStore::ema(const std::string& name) const { return entry(name).ema; }
const Tensor& ParamStore::first_moment(const std::string& name) const { return entry(name).m; }
const Tensor& ParamStore::second_moment(const std::string& name) const { return entry(name).v; }
std::int64_t ParamStore::step(const std::string& name) const { return entry(name).step; }

std::int64_t ParamStore::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& [_, e] : entries_) n += e.value.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, e] : entries_) e.value.zero_grad();
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const auto& name : order_) {
    const Entry& e = entry(name);
    Entry c;
    c.value = e.value.detach();
    c.value.set_requires_grad(true);
    c.m = e.m.detach();
    c.v = e.v.detach();
    c.ema = e.ema.detach();
    c.step = e.step;
    out.order_.push_back(name);
    out.entries_.emplace(name, std::move(c));
  }
  return out;
}

ParamStore ParamStore::ema_snapshot() const {
  ParamStore out = clone();
  for (auto& [name, e] : out.entries_) {
    e.value = entry(name).ema.detach();
    e.value.set_requires_grad(true);
  }
  return out;
}

void ParamStore::copy_values_from(const ParamStore& other) {
  for (const auto& name : order_) {
    Entry& e = entry(name);
    const Tensor& src = other.get(name);
    if (src.shape() != e.value.shape() || src.dtype() != e.value.dtype())
      throw ShapeError("copy_values_from: mismatch for '" + name + "'");
    e.value.mutable_buffer() = src.buffer();
  }
}

void adamw_step(ParamStore& store, const AdamWOptions& opt) {
  for (const auto& name : store.order_) {
    if (!store.entry(name).value.has_grad())
      throw Error("adamw_step: missing gradient for parameter '" + name + "'");
  }
  for (const auto& name : store.order_) {
    auto& e = store.entry(name);
    e.step += 1;
    const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(e.step));
    const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(e.step));
    visit_dtype(e.value.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto p = e.value.mutable_data<T>();
      auto m = e.m.mutable_data<T>();
      auto v = e.v.mutable_data<T>();
      auto g = e.value.grad_buffer()->template as<T>();
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g[i];
        const double mi = opt.beta1 * m[i] + (1.0 - opt.beta1) * gi;
        const double vi = opt.beta2 * v[i] + (1.0 - opt.beta2) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        double pi = p[i];
        pi -= opt.lr * opt.weight_decay * pi;
        pi -= opt.lr * (mi / bc1) / (std::sqrt(vi / bc2) + opt.eps);
        p[i] = static_cast<T>(pi);
      }
    });
    check_finite(e.value.buffer(), "adamw_step");
  }
}

void ema_update(ParamStore& store, double decay) {
  if (!(decay >= 0.0 && decay <= 1.0)) throw RangeError("ema_update: decay outside [0, 1]");
  for (auto& [_, e] : store.entries_) {
    visit_dtype(e.value.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto s = e.ema.mutable_data<T>();
      auto p = e.value.data<T>();
      for (std::size_t i = 0; i < s.size(); ++i)
        s[i] = static_cast<T>(decay * s[i] + (1.0 - decay) * p[i]);
    });
  }
}

// ---------------------------------------------------------------------------
// DALI-CKPT1 I/O

namespace {

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T take(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw FormatError("checkpoint truncated");
  return v;
}

void put_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(t.ndim()));
  for (auto e : t.shape()) put<std::uint64_t>(os, static_cast<std::uint64_t>(e));
  put<std::uint8_t>(os, static_cast<std::uint8_t>(t.dtype()));
  visit_dtype(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto d = t.data<T>();
    os.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size_bytes()));
  });
}

std::pair<std::string, Tensor> take_tensor(std::istream& is) {
  const auto name_len = take<std::uint32_t>(is);
  if (name_len > (1u << 16)) throw FormatError("checkpoint: implausible name length");
  std::string name(name_len, '\0');
  is.read(name.data(), name_len);
  const auto ndim = take<std::uint32_t>(is);
  if (ndim > 8) throw FormatError("checkpoint: implausible rank for '" + name + "'");
  Shape shape;
  for (std::uint32_t i = 0; i < ndim; ++i)
    shape.push_back(static_cast<std::int64_t>(take<std::uint64_t>(is)));
  const auto code = take<std::uint8_t>(is);
  if (code > 1) throw FormatError("checkpoint: unknown dtype code for '" + name + "'");
  const DType dt = static_cast<DType>(code);
  Buffer b(dt, static_cast<std::size_t>(shape_numel(shape)));
  visit_dtype(dt, [&](auto tag) {
    using T = decltype(tag);
    auto d = b.as<T>();
    is.read(reinterpret_cast<char*>(d.data()), static_cast<std::streamsize>(d.size_bytes()));
  });
  if (!is) throw FormatError("checkpoint truncated in '" + name + "'");
  check_finite(b, "checkpoint load");
  return {name, Tensor::from_buffer(shape, std::move(b))};
}

}  // namespace

void save_checkpoint(const ParamStore& store, const std::filesystem::path& path,
                     const std::string& header_json) {
  nlohmann::json header;
  try {
    header["meta"] = nlohmann::json::parse(header_json);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  header["format"] = "DALI-CKPT1";
  nlohmann::json steps = nlohmann::json::object();
  for (const auto& name : store.order_) steps[name] = store.entry(name).step;
  header["steps"] = steps;
  const std::string text = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open '" + path.string() + "' for writing");
  os.write(kMagic, static_cast<std::streamsize>(kMagicLen));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  auto section = [&](auto pick) {
    put<std::uint64_t>(os, store.order_.size());
    for (const auto& name : store.order_) put_tensor(os, name, pick(store.entry(name)));
  };
  section([](const ParamStore::Entry& e) -> const Tensor& { return e.value; });
  section([](const ParamStore::Entry& e) -> const Tensor& { return e.m; });
  section([](const ParamStore::Entry& e) -> const Tensor& { return e.v; });
  section([](const ParamStore::Entry& e) -> const Tensor& { return e.ema; });
  if (!os) throw FormatError("failed writing '" + path.string() + "'");
}

ParamStore load_checkpoint(const std::filesystem::path& path, std::string* header_json) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint '" + path.string() + "'");
  char magic[kMagicLen];
  is.read(magic, kMagicLen);
  if (!is || std::memcmp(magic, kMagic, kMagicLen) != 0)
    throw FormatError("'" + path.string() + "' is not a DALI-CKPT1 checkpoint");
  const auto header_len = take<std::uint32_t>(is);
  std::string text(header_len, '\0');
  is.read(text.data(), header_len);
  if (!is) throw FormatError("checkpoint header truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }

  ParamStore store;
  const auto count = take<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < count; ++i) {
    auto [name, t] = take_tensor(is);
    store.add(name, t);
  }
  const char* sections[] = {"first moment", "second moment", "ema"};
  for (int s = 0; s < 3; ++s) {
    if (take<std::uint64_t>(is) != count)
      throw FormatError(std::string("checkpoint ") + sections[s] + " section size mismatch");
    for (std::uint64_t i = 0; i < count; ++i) {
      auto [name, t] = take_tensor(is);
      auto& e = store.entry(name);
      if (t.shape() != e.value.shape())
        throw FormatError("checkpoint: state shape mismatch for '" + name + "'");
      (s == 0 ? e.m : s == 1 ? e.v : e.ema) = t;
    }
  }
  if (header.contains("steps")) {
    for (auto& [name, n] : header["steps"].items())
      if (store.contains(name)) store.entry(name).step = n.get<std::int64_t>();
  }
  if (header_json) *header_json = header.value("meta", nlohmann::json::object()).dump();
  return store;
}

void import_weights(ParamStore& target, const ParamStore& external,
                    const std::map<std::string, std::string>& name_map) {
  // Validate everything before touching the target.
  for (const auto& name : target.names()) {
    auto it = name_map.find(name);
    if (it == name_map.end()) throw Error("import_weights: no mapping entry for '" + name + "'");
    if (!external.contains(it->second))
      throw Error("import_weights: external tensor '" + it->second + "' not found");
    const Tensor& src = external.get(it->second);
    if (src.shape() != target.get(name).shape())
      throw ShapeError("import_weights: shape mismatch for '" + name + "' (" +
                       shape_str(src.shape()) + " vs " + shape_str(target.get(name).shape()) + ")");
  }
  for (const auto& name : target.names()) {
    const Tensor src = external.get(name_map.at(name)).to(target.get(name).dtype());
    target.get(name).mutable_buffer() = src.buffer();
  }
  // The shadow follows the imported values.
  ema_update(target, 0.0);
}

double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                  double eps) {
  for (const auto& p : params) {
    if (p.dtype() != DType::f64) throw Error("grad_check requires f64 parameters");
    if (!p.requires_grad()) throw Error("grad_check: parameter does not require grad");
  }
  for (auto p : params) p.zero_grad();
  Tensor y = f();
  if (!std::isfinite(y.item())) throw NumericError("grad_check: non-finite objective");
  std::vector<std::vector<double>> analytic;
  if (y.requires_grad()) {
    y.backward();
  }
  for (const auto& p : params) {
    std::vector<double> g(static_cast<std::size_t>(p.numel()), 0.0);
    if (const Buffer* b = p.grad_buffer())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = b->get(i);
    analytic.push_back(std::move(g));
  }

  double worst = 0.0;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor p = params[k];
    auto data = p.mutable_data<double>();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + eps;
      const double fp = f().item();
      data[i] = orig - eps;
      const double fm = f().item();
      data[i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw NumericError("grad_check: non-finite objective under perturbation");
      const double fd = (fp - fm) / (2.0 * eps);
      worst = std::max(worst, std::abs(analytic[k][i] - fd) / std::max(1.0, std::abs(fd)));
    }
  }
  for (auto p : params) p.zero_grad();
  return worst;
}

}  // namespace dali::num
