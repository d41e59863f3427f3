#include "knnmoe/checkpoint.hpp"

namespace knnmoe {

namespace {
constexpr char kMagic[8] = {'M', 'O', 'E', 'K', 'N', 'N', '1', '\0'};
constexpr int kVersion = 1;
}  // namespace

ojson model_config_json(const ModelConfig& cfg) {
  ojson j;
  j["vocab_size"] = cfg.vocab_size;
  j["dim"] = cfg.dim;
  j["num_layers"] = cfg.num_layers;
  j["num_heads"] = cfg.num_heads;
  j["max_seq_len"] = cfg.max_seq_len;
  j["num_experts"] = cfg.num_experts;
  j["active_experts"] = cfg.active_experts;
  j["expert_hidden"] = cfg.expert_hidden;
  j["renormalize_topk"] = cfg.renormalize_topk;
  j["moe_layers"] = cfg.moe_layer_ids();  // always resolved to the explicit list
  return j;
}

ModelConfig model_config_from_json(const ojson& j, const std::string& what) {
  check_keys(j,
             {"vocab_size", "dim", "num_layers", "num_heads", "max_seq_len", "num_experts",
              "active_experts", "expert_hidden", "renormalize_topk", "moe_layers"},
             what);
  ModelConfig cfg;
  cfg.vocab_size = get_int_or(j, "vocab_size", cfg.vocab_size, what);
  cfg.dim = get_int_or(j, "dim", cfg.dim, what);
  cfg.num_layers = get_int_or(j, "num_layers", cfg.num_layers, what);
  cfg.num_heads = get_int_or(j, "num_heads", cfg.num_heads, what);
  cfg.max_seq_len = get_int_or(j, "max_seq_len", cfg.max_seq_len, what);
  cfg.num_experts = get_int_or(j, "num_experts", cfg.num_experts, what);
  cfg.active_experts = get_int_or(j, "active_experts", cfg.active_experts, what);
  cfg.expert_hidden = get_int_or(j, "expert_hidden", cfg.expert_hidden, what);
  cfg.renormalize_topk = get_bool_or(j, "renormalize_topk", cfg.renormalize_topk, what);
  if (j.contains("moe_layers")) cfg.moe_layers = get_int_array(j, "moe_layers", what);
  cfg.validate();
  return cfg;
}

std::vector<uint8_t> serialize_checkpoint(const Model& m) {
  ojson hdr;
  hdr["format"] = "moe-knn-checkpoint";
  hdr["version"] = kVersion;
  hdr["config"] = model_config_json(m.cfg);
  ojson tensors = ojson::array();
  for (const auto& [name, t] : m.params) {
    ojson e;
    e["name"] = name;
    e["rows"] = t.rows;
    e["cols"] = t.cols;
    e["dtype"] = "f32";
    tensors.push_back(std::move(e));
  }
  hdr["tensors"] = std::move(tensors);
  std::string hs = hdr.dump();

  ByteWriter w;
  w.raw(kMagic, 8);
  w.u32(uint32_t(hs.size()));
  w.str(hs);
  for (const auto& [name, t] : m.params)
    for (double v : t.data) w.f32(float(v));
  return std::move(w.buf);
}

void save_checkpoint(const Model& m, const std::string& path) {
  write_file_bytes(path, serialize_checkpoint(m));
}

Model parse_checkpoint(const std::vector<uint8_t>& bytes, const std::string& what) {
  ByteReader r(bytes.data(), bytes.size(), what);
  if (r.str(8) != std::string(kMagic, 8)) fail(what + ": bad magic, not a checkpoint file");
  uint32_t hlen = r.u32();
  ojson hdr = parse_json(r.str(hlen), what + " header");
  if (get_string(hdr, "format", what) != "moe-knn-checkpoint")
    fail(what + ": unexpected format \"" + get_string(hdr, "format", what) + "\"");
  if (get_int(hdr, "version", what) != kVersion)
    fail(what + ": unsupported version " + std::to_string(get_int(hdr, "version", what)));

  Model m;
  m.cfg = model_config_from_json(get_field(hdr, "config", what), what + " config");

  const ojson& tensors = get_field(hdr, "tensors", what);
  if (!tensors.is_array()) fail(what + ": \"tensors\" must be an array");
  std::vector<ParamSpec> layout = param_layout(m.cfg);
  if (tensors.size() != layout.size())
    fail(what + ": manifest lists " + std::to_string(tensors.size()) + " tensors, config implies " +
         std::to_string(layout.size()));
  for (size_t i = 0; i < layout.size(); ++i) {
    const ojson& e = tensors[i];
    std::string ctx = what + " tensor " + std::to_string(i);
    std::string name = get_string(e, "name", ctx);
    int rows = get_int(e, "rows", ctx);
    int cols = get_int(e, "cols", ctx);
    std::string dtype = get_string(e, "dtype", ctx);
    if (name != layout[i].name || rows != layout[i].rows || cols != layout[i].cols)
      fail(ctx + ": expected " + layout[i].name + " [" + std::to_string(layout[i].rows) + "x" +
           std::to_string(layout[i].cols) + "], found " + name + " [" + std::to_string(rows) +
           "x" + std::to_string(cols) + "]");
    if (dtype != "f32") fail(ctx + ": unsupported dtype \"" + dtype + "\"");
    Tensor t(rows, cols);
    for (double& v : t.data) v = double(r.f32());
    m.params.emplace_back(std::move(name), std::move(t));
  }
  if (!r.done()) fail(what + ": trailing bytes after tensor payload");
  return m;
}

Model load_checkpoint(const std::string& path) {
  return parse_checkpoint(read_file_bytes(path, "checkpoint"), "checkpoint " + path);
}

std::string model_fingerprint(const Model& m) {
  std::vector<uint8_t> bytes = serialize_checkpoint(m);
  return hex64(fnv1a(bytes.data(), bytes.size()));
}

}  // namespace knnmoe
