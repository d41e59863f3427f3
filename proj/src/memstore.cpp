#include "knnmoe/memstore.hpp"

#include <cmath>

#include "knnmoe/jsonutil.hpp"
#include "knnmoe/kernels.hpp"

namespace knnmoe {

std::string kernel_name(SimKernel k) { return k == SimKernel::Rbf ? "rbf" : "cosine"; }

SimKernel kernel_from_name(const std::string& name, const std::string& what) {
  if (name == "rbf") return SimKernel::Rbf;
  if (name == "cosine") return SimKernel::Cosine;
  fail(what + ": unknown kernel \"" + name + "\" (expected rbf or cosine)");
}

void LayerMemory::validate(int num_experts, const std::string& what) const {
  if (dim < 1) fail(what + ": dim must be >= 1");
  if (keys.rows != int(values.size()))
    fail(what + ": " + std::to_string(keys.rows) + " keys but " + std::to_string(values.size()) +
         " values");
  if (keys.rows > 0 && keys.cols != dim)
    fail(what + ": keys are " + keys.shape_str() + ", expected width " + std::to_string(dim));
  if (!(gamma > 0.0)) fail(what + ": gamma must be > 0");
  for (size_t i = 0; i < values.size(); ++i)
    values[i].validate(num_experts, what + " value " + std::to_string(i));
}

double rbf_similarity(double dist2, double gamma) { return std::exp(-gamma * dist2); }

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) fail("cosine: dimension mismatch");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  double c = ab / (std::sqrt(aa) * std::sqrt(bb));
  return c > 0.0 ? c : 0.0;
}

NeighborSet query(const LayerMemory& mem, std::span<const double> key, int k, SimKernel kernel) {
  if (int(key.size()) != mem.dim)
    fail("query: key has " + std::to_string(key.size()) + " dims, memory expects " +
         std::to_string(mem.dim));
  if (k < 1) fail("query: k must be >= 1");

  NeighborSet out;
  int m = mem.size();
  if (m == 0) return out;
  int keep = std::min(k, m);

  // insertion into a small sorted buffer; strict < keeps earlier row ids on ties
  out.indices.reserve(size_t(keep));
  out.dist2.reserve(size_t(keep));
  for (int i = 0; i < m; ++i) {
    double d2 = kern::sq_l2_distance(key.data(), mem.keys.row(i), mem.dim);
    if (int(out.indices.size()) == keep && d2 >= out.dist2.back()) continue;
    int pos = int(out.indices.size());
    while (pos > 0 && d2 < out.dist2[size_t(pos) - 1]) --pos;
    out.indices.insert(out.indices.begin() + pos, i);
    out.dist2.insert(out.dist2.begin() + pos, d2);
    if (int(out.indices.size()) > keep) {
      out.indices.pop_back();
      out.dist2.pop_back();
    }
  }

  out.sims.resize(out.indices.size());
  for (size_t j = 0; j < out.indices.size(); ++j) {
    if (kernel == SimKernel::Rbf)
      out.sims[j] = rbf_similarity(out.dist2[j], mem.gamma);
    else
      out.sims[j] = cosine_similarity(key, mem.keys.row_span(out.indices[j]));
  }
  return out;
}

double estimate_gamma(const Tensor& keys) {
  int m = keys.rows;
  if (m <= 1) return 1.0;
  int stride = (m + 1023) / 1024;

  double total = 0.0;
  int count = 0;
  for (int i = 0; i < m; i += stride) {
    double best = -1.0;
    for (int j = 0; j < m; ++j) {
      if (j == i) continue;
      double d2 = kern::sq_l2_distance(keys.row(i), keys.row(j), keys.cols);
      if (best < 0.0 || d2 < best) best = d2;
    }
    total += std::sqrt(best);
    ++count;
  }
  double dbar = total / count;
  if (dbar == 0.0) return 1.0;
  return 1.0 / (2.0 * dbar * dbar);
}

const LayerMemory* MemoryFile::layer(int layer_id) const {
  for (const LayerMemory& l : layers)
    if (l.layer_id == layer_id) return &l;
  return nullptr;
}

int MemoryFile::total_entries() const {
  int n = 0;
  for (const LayerMemory& l : layers) n += l.size();
  return n;
}

void MemoryFile::validate(const std::string& what) const {
  if (dim < 1) fail(what + ": dim must be >= 1");
  if (num_experts < 1) fail(what + ": num_experts must be >= 1");
  if (active_experts < 1 || active_experts > num_experts)
    fail(what + ": active_experts out of range");
  if (model_fingerprint.size() != 16) fail(what + ": malformed model fingerprint");
  int prev = -1;
  for (const LayerMemory& l : layers) {
    if (l.layer_id <= prev) fail(what + ": layer ids must be strictly increasing");
    prev = l.layer_id;
    l.validate(num_experts, what + " layer " + std::to_string(l.layer_id));
    if (l.dim != dim) fail(what + ": layer dim mismatch");
  }
}

namespace {
constexpr char kMagic[8] = {'M', 'O', 'E', 'M', 'E', 'M', '1', '\0'};
constexpr int kVersion = 1;
}  // namespace

std::vector<uint8_t> serialize_memory(const MemoryFile& m) {
  m.validate("memory");
  ojson hdr;
  hdr["format"] = "moe-knn-memory";
  hdr["version"] = kVersion;
  hdr["model_fingerprint"] = m.model_fingerprint;
  hdr["dim"] = m.dim;
  hdr["num_experts"] = m.num_experts;
  hdr["active_experts"] = m.active_experts;
  hdr["kernel"] = kernel_name(m.kernel);
  {
    ojson b;
    b["eta"] = m.build.eta;
    b["steps"] = m.build.steps;
    b["mode"] = m.build.mode;
    hdr["build"] = std::move(b);
  }
  ojson layers = ojson::array();
  for (const LayerMemory& l : m.layers) {
    ojson e;
    e["layer_id"] = l.layer_id;
    e["count"] = l.size();
    e["gamma"] = l.gamma;
    layers.push_back(std::move(e));
  }
  hdr["layers"] = std::move(layers);
  std::string hs = hdr.dump();

  ByteWriter w;
  w.raw(kMagic, 8);
  w.u32(uint32_t(hs.size()));
  w.str(hs);
  for (const LayerMemory& l : m.layers) {
    for (double v : l.keys.data) w.f32(float(v));
    for (const GatingVector& g : l.values) {
      w.u16(uint16_t(g.entries.size()));
      for (const GateEntry& e : g.entries) {
        w.u16(uint16_t(e.expert));
        w.f32(float(e.weight));
      }
    }
  }
  return std::move(w.buf);
}

void save_memory(const MemoryFile& m, const std::string& path) {
  write_file_bytes(path, serialize_memory(m));
}

MemoryFile parse_memory(const std::vector<uint8_t>& bytes, const std::string& what) {
  ByteReader r(bytes.data(), bytes.size(), what);
  if (r.str(8) != std::string(kMagic, 8)) fail(what + ": bad magic, not a memory file");
  uint32_t hlen = r.u32();
  ojson hdr = parse_json(r.str(hlen), what + " header");
  if (get_string(hdr, "format", what) != "moe-knn-memory")
    fail(what + ": unexpected format \"" + get_string(hdr, "format", what) + "\"");
  if (get_int(hdr, "version", what) != kVersion)
    fail(what + ": unsupported version " + std::to_string(get_int(hdr, "version", what)));

  MemoryFile m;
  m.model_fingerprint = get_string(hdr, "model_fingerprint", what);
  m.dim = get_int(hdr, "dim", what);
  m.num_experts = get_int(hdr, "num_experts", what);
  m.active_experts = get_int(hdr, "active_experts", what);
  m.kernel = kernel_from_name(get_string(hdr, "kernel", what), what);
  const ojson& b = get_field(hdr, "build", what);
  m.build.eta = get_double(b, "eta", what + " build");
  m.build.steps = get_int(b, "steps", what + " build");
  m.build.mode = get_string(b, "mode", what + " build");

  const ojson& layers = get_field(hdr, "layers", what);
  if (!layers.is_array()) fail(what + ": \"layers\" must be an array");
  for (const ojson& e : layers) {
    std::string ctx = what + " layer entry";
    LayerMemory l;
    l.layer_id = get_int(e, "layer_id", ctx);
    l.dim = m.dim;
    int count = get_int(e, "count", ctx);
    if (count < 0) fail(ctx + ": negative count");
    l.gamma = get_double(e, "gamma", ctx);
    l.keys = Tensor(count, m.dim);
    for (double& v : l.keys.data) v = double(r.f32());
    l.values.resize(size_t(count));
    for (int i = 0; i < count; ++i) {
      int n = r.u16();
      GatingVector& g = l.values[size_t(i)];
      g.entries.resize(size_t(n));
      for (int j = 0; j < n; ++j) {
        g.entries[size_t(j)].expert = r.u16();
        g.entries[size_t(j)].weight = double(r.f32());
      }
    }
    m.layers.push_back(std::move(l));
  }
  if (!r.done()) fail(what + ": trailing bytes after layer payload");
  m.validate(what);
  return m;
}

MemoryFile load_memory(const std::string& path) {
  return parse_memory(read_file_bytes(path, "memory"), "memory " + path);
}

}  // namespace knnmoe
