#include "ibq/cli/run_config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>

#include "ibq/core/errors.hpp"
#include "ibq/data/archive.hpp"

namespace ibq {
namespace {

namespace pt = boost::property_tree;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* want) {
  throw ConfigError("config key '" + key + "': expected " + want + ", got '" + value + "'");
}

template <class T>
T parse_number(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  T out{};
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || ptr != v.data() + v.size()) {
    bad_value(key, raw, std::is_integral_v<T> ? "an integer" : "a number");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad_value(key, raw, "true or false");
}

std::vector<double> parse_list(const std::string& key, const std::string& raw) {
  std::vector<double> out;
  std::stringstream ss(raw);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (trim(item).empty()) continue;
    out.push_back(parse_number<double>(key, item));
  }
  return out;
}

// Shortest text that reads back to the same double.
std::string fmt(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string fmt_list(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt(v[i]);
  return s;
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class T, class Ref>
Field number(std::string key, Ref ref) {
  return {std::move(key),
          [ref](RunConfig& c, const std::string& k, const std::string& v) { ref(c) = parse_number<T>(k, v); },
          [ref](const RunConfig& c) {
            const T v = ref(const_cast<RunConfig&>(c));
            if constexpr (std::is_integral_v<T>) return std::to_string(v);
            else return fmt(v);
          }};
}

template <class Ref>
Field text(std::string key, Ref ref) {
  return {std::move(key), [ref](RunConfig& c, const std::string&, const std::string& v) { ref(c) = trim(v); },
          [ref](const RunConfig& c) { return std::string(ref(const_cast<RunConfig&>(c))); }};
}

const std::vector<Field>& schema() {
  static const std::vector<Field> f = [] {
    std::vector<Field> s;
    s.push_back(number<std::uint64_t>("seed", [](RunConfig& c) -> auto& { return c.seed; }));
    s.push_back({"deterministic",
                 [](RunConfig& c, const std::string& k, const std::string& v) { c.deterministic = parse_bool(k, v); },
                 [](const RunConfig& c) { return std::string(c.deterministic ? "true" : "false"); }});

    s.push_back(text("data.source", [](RunConfig& c) -> auto& { return c.data.source; }));
    s.push_back({"data.path", [](RunConfig& c, const std::string&, const std::string& v) { c.data.path = trim(v); },
                 [](const RunConfig& c) { return c.data.path.string(); }});
    s.push_back(number<int>("data.size", [](RunConfig& c) -> auto& { return c.data.size; }));
    s.push_back(number<std::int64_t>("data.n", [](RunConfig& c) -> auto& { return c.data.n; }));
    s.push_back(number<std::uint64_t>("data.seed", [](RunConfig& c) -> auto& { return c.data.seed; }));
    s.push_back(number<double>("data.val_fraction", [](RunConfig& c) -> auto& { return c.data.val_fraction; }));

    s.push_back(number<int>("tokenizer.K", [](RunConfig& c) -> auto& { return c.tokenizer.codebook_size; }));
    s.push_back(number<int>("tokenizer.D", [](RunConfig& c) -> auto& { return c.tokenizer.code_dim; }));
    s.push_back(number<int>("tokenizer.p", [](RunConfig& c) -> auto& { return c.tokenizer.downsample; }));
    s.push_back(number<int>("tokenizer.channels", [](RunConfig& c) -> auto& { return c.tokenizer.channels; }));
    s.push_back(
        number<int>("tokenizer.num_resblocks", [](RunConfig& c) -> auto& { return c.tokenizer.num_resblocks; }));
    s.push_back({"tokenizer.quantizer",
                 [](RunConfig& c, const std::string&, const std::string& v) {
                   c.tokenizer.quantizer = parse_quant_kind(trim(v));
                 },
                 [](const RunConfig& c) { return std::string(quant_kind_name(c.tokenizer.quantizer)); }});
    s.push_back({"tokenizer.codebook_init",
                 [](RunConfig& c, const std::string& k, const std::string& v) {
                   const std::string t = trim(v);
                   if (t == "uniform") c.tokenizer.codebook_init = CodebookInit::uniform;
                   else if (t == "normal") c.tokenizer.codebook_init = CodebookInit::normal;
                   else bad_value(k, v, "uniform or normal");
                 },
                 [](const RunConfig& c) {
                   return std::string(c.tokenizer.codebook_init == CodebookInit::uniform ? "uniform" : "normal");
                 }});
    s.push_back(number<double>("tokenizer.codebook_init_scale",
                               [](RunConfig& c) -> auto& { return c.tokenizer.codebook_init_scale; }));
    s.push_back(number<double>("tokenizer.logit_scale", [](RunConfig& c) -> auto& { return c.tokenizer.logit_scale; }));
    s.push_back(number<double>("tokenizer.beta", [](RunConfig& c) -> auto& { return c.beta; }));
    s.push_back({"tokenizer.recon",
                 [](RunConfig& c, const std::string& k, const std::string& v) {
                   const std::string t = trim(v);
                   if (t == "l2") c.recon = ReconNorm::l2;
                   else if (t == "l1") c.recon = ReconNorm::l1;
                   else bad_value(k, v, "l2 or l1");
                 },
                 [](const RunConfig& c) { return std::string(c.recon == ReconNorm::l2 ? "l2" : "l1"); }});
    s.push_back(number<double>("tokenizer.w_recon", [](RunConfig& c) -> auto& { return c.weights.recon; }));
    s.push_back(number<double>("tokenizer.w_quant", [](RunConfig& c) -> auto& { return c.weights.quant; }));
    s.push_back(number<double>("tokenizer.w_entropy", [](RunConfig& c) -> auto& { return c.weights.entropy; }));

    s.push_back(number<double>("optim.lr", [](RunConfig& c) -> auto& { return c.lr; }));
    s.push_back({"optim.betas",
                 [](RunConfig& c, const std::string& k, const std::string& v) {
                   auto b = parse_list(k, v);
                   if (b.size() != 2) bad_value(k, v, "two comma-separated numbers");
                   c.adam_beta1 = b[0];
                   c.adam_beta2 = b[1];
                 },
                 [](const RunConfig& c) { return fmt_list({c.adam_beta1, c.adam_beta2}); }});
    s.push_back({"optim.milestones",
                 [](RunConfig& c, const std::string& k, const std::string& v) { c.milestones = parse_list(k, v); },
                 [](const RunConfig& c) { return fmt_list(c.milestones); }});
    s.push_back(number<int>("optim.epochs", [](RunConfig& c) -> auto& { return c.epochs; }));
    s.push_back(number<int>("optim.batch", [](RunConfig& c) -> auto& { return c.batch; }));

    s.push_back(number<int>("ar.d", [](RunConfig& c) -> auto& { return c.ar.d; }));
    s.push_back(number<int>("ar.width", [](RunConfig& c) -> auto& { return c.ar.width; }));
    s.push_back(number<int>("ar.heads", [](RunConfig& c) -> auto& { return c.ar.heads; }));
    s.push_back(number<int>("ar.depth", [](RunConfig& c) -> auto& { return c.ar.depth; }));
    s.push_back(number<int>("ar.T", [](RunConfig& c) -> auto& { return c.ar.T; }));
    s.push_back(number<double>("ar.dropout", [](RunConfig& c) -> auto& { return c.ar.dropout; }));
    s.push_back(number<int>("ar.epochs", [](RunConfig& c) -> auto& { return c.ar.epochs; }));
    s.push_back(number<int>("ar.batch", [](RunConfig& c) -> auto& { return c.ar.batch; }));
    s.push_back(number<double>("ar.lr", [](RunConfig& c) -> auto& { return c.ar.lr; }));
    s.push_back(number<double>("ar.weight_decay", [](RunConfig& c) -> auto& { return c.ar.weight_decay; }));
    s.push_back(number<double>("ar.eval_fraction", [](RunConfig& c) -> auto& { return c.ar.eval_fraction; }));

    s.push_back(number<int>("sample.n", [](RunConfig& c) -> auto& { return c.sample.n; }));
    s.push_back(number<int>("sample.class", [](RunConfig& c) -> auto& { return c.sample.label; }));
    s.push_back(number<double>("sample.temperature", [](RunConfig& c) -> auto& { return c.sample.temperature; }));
    s.push_back(number<int>("sample.top_k", [](RunConfig& c) -> auto& { return c.sample.top_k; }));

    s.push_back({"output.dir", [](RunConfig& c, const std::string&, const std::string& v) { c.output_dir = trim(v); },
                 [](const RunConfig& c) { return c.output_dir.string(); }});
    return s;
  }();
  return f;
}

const Field* find_field(const std::string& key) {
  for (const Field& f : schema()) {
    if (f.key == key) return &f;
  }
  return nullptr;
}

void apply_overrides(RunConfig& c, const std::vector<std::string>& overrides) {
  for (const std::string& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not of the form key=value");
    c.set(trim(o.substr(0, eq)), o.substr(eq + 1));
  }
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  const Field* f = find_field(key);
  if (!f) throw ConfigError("unknown config key '" + key + "'");
  f->set(*this, key, value);
}

RunConfig RunConfig::parse(const std::string& text, const std::string& origin,
                           const std::vector<std::string>& overrides) {
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(origin + ":" + std::to_string(e.line()) + ": " + e.message());
  }
  RunConfig c;
  for (const auto& [name, node] : tree) {
    if (node.empty()) {
      c.set(name, node.data());
      continue;
    }
    for (const auto& [key, leaf] : node) {
      if (!leaf.empty()) throw ConfigError(origin + ": nested key '" + name + "." + key + "'");
      c.set(name + "." + key, leaf.data());
    }
  }
  apply_overrides(c, overrides);
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string(), overrides);
}

void RunConfig::resolve_seed() {
  if (deterministic) return;
  std::random_device rd;
  seed = (static_cast<std::uint64_t>(rd()) << 32) | rd();
  deterministic = true;
}

void RunConfig::validate() const {
  if (data.source != "synthetic" && data.source != "folder") {
    throw ConfigError("data.source must be synthetic or folder, got '" + data.source + "'");
  }
  if (data.source == "folder" && data.path.empty()) throw ConfigError("data.source = folder needs data.path");
  if (data.size < 1 || data.n < 2) throw ConfigError("data.size must be positive and data.n at least 2");
  if (!(data.val_fraction > 0 && data.val_fraction < 1)) throw ConfigError("data.val_fraction must lie in (0, 1)");
  tokenizer_train({}).validate();
  if (ar.d < 0 || ar.T < 0) throw ConfigError("ar.d and ar.T must be non-negative");
  if (ar.d == 0) {
    ARConfig a;
    a.width = ar.width;
    a.heads = ar.heads;
    a.depth = ar.depth;
    a.dropout = ar.dropout;
    a.validate();
  }
  if (ar.epochs < 1 || ar.batch < 1) throw ConfigError("ar.epochs and ar.batch must be positive");
  if (!(ar.lr > 0)) throw ConfigError("ar.lr must be positive");
  if (!(ar.dropout >= 0 && ar.dropout < 1)) throw ConfigError("ar.dropout must lie in [0, 1)");
  if (!(ar.eval_fraction > 0 && ar.eval_fraction < 1)) throw ConfigError("ar.eval_fraction must lie in (0, 1)");
  if (sample.n < 1) throw ConfigError("sample.n must be positive");
  if (!(sample.temperature > 0)) throw ConfigError("sample.temperature must be positive");
  if (sample.top_k < 0) throw ConfigError("sample.top_k must be non-negative");
}

std::string RunConfig::to_ini() const {
  std::ostringstream os;
  std::string section;
  for (const Field& f : schema()) {
    const auto dot = f.key.find('.');
    std::string name = f.key;
    if (dot != std::string::npos) {
      const std::string sec = f.key.substr(0, dot);
      if (sec != section) {
        os << "\n[" << sec << "]\n";
        section = sec;
      }
      name = f.key.substr(dot + 1);
    }
    os << name << " = " << f.get(*this) << "\n";
  }
  return os.str();
}

std::filesystem::path RunConfig::output() const {
  if (output_dir.is_absolute()) return output_dir;
  const char* root = std::getenv(kOutputRootEnv);
  if (root && *root) return std::filesystem::path(root) / output_dir;
  return output_dir;
}

TokenizerTrainConfig RunConfig::tokenizer_train(const std::filesystem::path& out_dir) const {
  TokenizerTrainConfig t;
  t.model = tokenizer;
  t.model.image_size = data.size;
  t.epochs = epochs;
  t.batch_size = batch;
  t.lr = lr;
  t.adam_beta1 = adam_beta1;
  t.adam_beta2 = adam_beta2;
  t.milestones = milestones;
  t.beta = beta;
  t.weights = weights;
  t.recon = recon;
  t.seed = seed;
  t.out_dir = out_dir;
  return t;
}

ARTrainConfig RunConfig::ar_train(const TokenDataset& tokens, const std::filesystem::path& out_dir) const {
  const int T = static_cast<int>(tokens.T);
  if (ar.T != 0 && ar.T != T) {
    throw ConfigError("ar.T = " + std::to_string(ar.T) + " but the token file holds sequences of length " +
                      std::to_string(T));
  }
  ARTrainConfig a;
  if (ar.d > 0) {
    a.model = ar_scale_config(ar.d, static_cast<int>(tokens.K), T, static_cast<int>(tokens.num_classes));
  } else {
    a.model.width = ar.width;
    a.model.heads = ar.heads;
    a.model.depth = ar.depth;
    a.model.vocab = static_cast<int>(tokens.K);
    a.model.seq_len = T;
    a.model.num_classes = static_cast<int>(tokens.num_classes);
  }
  a.model.dropout = ar.dropout;
  a.epochs = ar.epochs;
  a.batch_size = ar.batch;
  a.lr = ar.lr;
  a.weight_decay = ar.weight_decay;
  a.seed = seed;
  a.out_dir = out_dir;
  a.validate();
  return a;
}

ImageDataset load_images(const DataConfig& cfg) {
  if (cfg.source == "synthetic") return synth_generate(cfg.n, cfg.size, cfg.seed);
  if (!std::filesystem::is_directory(cfg.path)) {
    throw DataError("data path " + cfg.path.string() + " does not exist or is not a directory");
  }
  return load_ppm_folder(cfg.path, cfg.size);
}

DatasetSplit load_split(const DataConfig& cfg) {
  return split_dataset(load_images(cfg), cfg.val_fraction, cfg.seed);
}

void echo_config(const RunConfig& cfg, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::string text = cfg.to_ini();
  write_file_bytes(dir / "resolved.cfg", std::vector<std::uint8_t>(text.begin(), text.end()));
}

}  // namespace ibq
