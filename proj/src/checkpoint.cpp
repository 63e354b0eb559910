#include "popdyn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

#include "json.hpp"

namespace popdyn::ckpt {

static_assert(std::endian::native == std::endian::little,
              "checkpoint container assumes a little-endian host");

namespace {

using nlohmann::json;

constexpr char kMagic[] = "POPDYN-CKPT v1\n";
constexpr std::size_t kMagicLen = sizeof(kMagic) - 1;

struct ArraySpec {
  std::string name;
  Index rows, cols;
  const Mat* src;  // save side
  Mat* dst;        // load side
};

// Parameter blocks in their canonical order; fills either src or dst.
template <typename EP, typename IP>
std::vector<ArraySpec> layout(EP& xi, IP* theta) {
  constexpr bool kLoading = !std::is_const_v<EP>;
  std::vector<ArraySpec> specs;
  auto add = [&](const std::string& name, Index rows, Index cols, auto& m) {
    ArraySpec s{name, rows, cols, nullptr, nullptr};
    if constexpr (kLoading) {
      m.resize(rows, cols);
      s.dst = &m;
    } else {
      s.src = &m;
    }
    specs.push_back(std::move(s));
  };
  const auto& es = xi.shape;
  if constexpr (kLoading) {
    xi.w.resize(static_cast<std::size_t>(es.depth()));
    xi.b.resize(static_cast<std::size_t>(es.depth()));
  }
  for (Index l = 0; l < es.depth(); ++l) {
    const Index fan_in = l == 0 ? es.input_dim : es.widths[static_cast<std::size_t>(l - 1)];
    add("xi.w" + std::to_string(l), fan_in, es.widths[static_cast<std::size_t>(l)],
        xi.w[static_cast<std::size_t>(l)]);
  }
  for (Index l = 0; l < es.depth(); ++l)
    add("xi.b" + std::to_string(l), 1, es.widths[static_cast<std::size_t>(l)],
        xi.b[static_cast<std::size_t>(l)]);
  if (theta) {
    const auto& ts = theta->shape;
    if constexpr (kLoading) {
      theta->wx.resize(static_cast<std::size_t>(ts.depth()));
      theta->wz.resize(static_cast<std::size_t>(ts.depth() - 1));
      theta->b.resize(static_cast<std::size_t>(ts.depth()));
    }
    for (Index l = 0; l < ts.depth(); ++l)
      add("theta.wx" + std::to_string(l), ts.input_dim, ts.widths[static_cast<std::size_t>(l)],
          theta->wx[static_cast<std::size_t>(l)]);
    for (Index l = 1; l < ts.depth(); ++l)
      add("theta.wz" + std::to_string(l - 1), ts.widths[static_cast<std::size_t>(l - 1)],
          ts.widths[static_cast<std::size_t>(l)], theta->wz[static_cast<std::size_t>(l - 1)]);
    for (Index l = 0; l < ts.depth(); ++l)
      add("theta.b" + std::to_string(l), 1, ts.widths[static_cast<std::size_t>(l)],
          theta->b[static_cast<std::size_t>(l)]);
  }
  return specs;
}

json widths_json(const std::vector<Index>& widths) {
  json a = json::array();
  for (Index w : widths) a.push_back(w);
  return a;
}

std::vector<Index> widths_from(const json& a, const std::string& where) {
  if (!a.is_array() || a.empty()) throw DataError("checkpoint manifest: bad widths in " + where);
  std::vector<Index> out;
  for (const json& v : a) {
    if (!v.is_number_integer()) throw DataError("checkpoint manifest: bad widths in " + where);
    out.push_back(v.get<Index>());
  }
  return out;
}

template <typename T>
T field(const json& j, const std::string& key) {
  if (!j.contains(key)) throw DataError("checkpoint manifest missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw DataError("checkpoint manifest field '" + key + "' has the wrong type");
  }
}

}  // namespace

void save_checkpoint(const Checkpoint& c, const std::string& path) {
  if (c.kind != "jkonet" && c.kind != "forward")
    throw ConfigError("checkpoint kind must be 'jkonet' or 'forward', got '" + c.kind + "'");
  c.xi.shape.validate();
  if (c.theta) c.theta->shape.validate();
  json config;
  try {
    config = json::parse(c.config_json.empty() ? "{}" : c.config_json);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("checkpoint config echo is not valid JSON: ") + e.what());
  }

  const Checkpoint& cc = c;
  std::vector<ArraySpec> specs =
      layout(cc.xi, cc.theta ? &*cc.theta : static_cast<const icnn::IcnnParams*>(nullptr));

  json manifest;
  manifest["format_version"] = 1;
  manifest["kind"] = c.kind;
  manifest["seed"] = c.seed;
  manifest["step"] = c.step;
  manifest["config"] = std::move(config);
  manifest["energy"] = {{"input_dim", c.xi.shape.input_dim},
                        {"widths", widths_json(c.xi.shape.widths)}};
  if (c.theta)
    manifest["icnn"] = {{"input_dim", c.theta->shape.input_dim},
                        {"widths", widths_json(c.theta->shape.widths)},
                        {"beta", c.theta->shape.beta}};
  json arrays = json::array();
  for (const ArraySpec& s : specs)
    arrays.push_back({{"name", s.name}, {"rows", s.rows}, {"cols", s.cols}});
  manifest["arrays"] = std::move(arrays);

  const std::string text = manifest.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out.write(kMagic, static_cast<std::streamsize>(kMagicLen));
  const std::uint64_t len = text.size();
  char lenbuf[8];
  std::memcpy(lenbuf, &len, 8);
  out.write(lenbuf, 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const ArraySpec& s : specs) {
    if (s.src->rows() != s.rows || s.src->cols() != s.cols)
      throw ShapeError("checkpoint array " + s.name + " has shape " +
                       std::to_string(s.src->rows()) + "x" + std::to_string(s.src->cols()) +
                       ", expected " + std::to_string(s.rows) + "x" + std::to_string(s.cols));
    out.write(reinterpret_cast<const char*>(s.src->data()),
              static_cast<std::streamsize>(sizeof(double)) * s.rows * s.cols);
  }
  out.flush();
  if (!out) throw DataError("write failed for '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path + "'");
  char magic[kMagicLen];
  in.read(magic, static_cast<std::streamsize>(kMagicLen));
  if (!in || std::memcmp(magic, kMagic, kMagicLen) != 0)
    throw DataError("'" + path + "' is not a model checkpoint (bad magic)");
  char lenbuf[8];
  in.read(lenbuf, 8);
  if (!in) throw DataError("'" + path + "': truncated manifest length");
  std::uint64_t len = 0;
  std::memcpy(&len, lenbuf, 8);
  if (len == 0 || len > (1ULL << 30)) throw DataError("'" + path + "': implausible manifest size");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw DataError("'" + path + "': truncated manifest");

  json manifest;
  try {
    manifest = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError("'" + path + "': manifest is not valid JSON: " + e.what());
  }
  if (field<int>(manifest, "format_version") != 1)
    throw DataError("'" + path + "': unsupported format version");

  Checkpoint c;
  c.kind = field<std::string>(manifest, "kind");
  if (c.kind != "jkonet" && c.kind != "forward")
    throw DataError("'" + path + "': unknown model kind '" + c.kind + "'");
  c.seed = field<std::uint64_t>(manifest, "seed");
  c.step = field<long>(manifest, "step");
  if (!manifest.contains("config")) throw DataError("checkpoint manifest missing field 'config'");
  c.config_json = manifest.at("config").dump();

  if (!manifest.contains("energy")) throw DataError("checkpoint manifest missing field 'energy'");
  const json& ej = manifest.at("energy");
  c.xi.shape.input_dim = field<Index>(ej, "input_dim");
  c.xi.shape.widths = widths_from(ej.contains("widths") ? ej.at("widths") : json(), "energy");
  c.xi.shape.validate();
  if (manifest.contains("icnn")) {
    const json& tj = manifest.at("icnn");
    icnn::IcnnParams t;
    t.shape.input_dim = field<Index>(tj, "input_dim");
    t.shape.widths = widths_from(tj.contains("widths") ? tj.at("widths") : json(), "icnn");
    t.shape.beta = field<double>(tj, "beta");
    t.shape.validate();
    c.theta = std::move(t);
  }

  std::vector<ArraySpec> specs =
      layout(c.xi, c.theta ? &*c.theta : static_cast<icnn::IcnnParams*>(nullptr));
  if (!manifest.contains("arrays") || !manifest.at("arrays").is_array() ||
      manifest.at("arrays").size() != specs.size())
    throw DataError("'" + path + "': manifest array list does not match the declared shapes");
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const json& aj = manifest.at("arrays").at(i);
    if (field<std::string>(aj, "name") != specs[i].name ||
        field<Index>(aj, "rows") != specs[i].rows || field<Index>(aj, "cols") != specs[i].cols)
      throw DataError("'" + path + "': array " + std::to_string(i) +
                      " does not match the declared shapes (expected " + specs[i].name + ")");
    in.read(reinterpret_cast<char*>(specs[i].dst->data()),
            static_cast<std::streamsize>(sizeof(double)) * specs[i].rows * specs[i].cols);
    if (!in) throw DataError("'" + path + "': truncated array data at " + specs[i].name);
  }
  if (in.peek() != std::char_traits<char>::eof())
    throw DataError("'" + path + "': trailing bytes after array data");
  return c;
}

}  // namespace popdyn::ckpt
