#include "cgfed/config.hpp"

#include <json.hpp>

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "cgfed/privacy.hpp"

namespace cgfed {

using nlohmann::json;

namespace {

[[noreturn]] void bad(const std::string& msg) {
  throw std::invalid_argument("config: " + msg);
}

// strict section reader: every key must be known, every value type-checked
struct Section {
  const json& j;
  std::string name;
  std::set<std::string> seen;

  Section(const json& doc, const std::string& key) : j(doc.contains(key) ? doc.at(key) : empty()), name(key) {
    if (doc.contains(key) && !doc.at(key).is_object()) bad("section '" + key + "' must be an object");
  }
  static const json& empty() {
    static const json e = json::object();
    return e;
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen.insert(key);
    if (!j.contains(key)) return;
    try {
      out = j.at(key).get<T>();
    } catch (const json::exception&) {
      bad("key '" + name + "." + key + "' has the wrong type");
    }
  }

  void finish() const {
    for (auto it = j.begin(); it != j.end(); ++it)
      if (!seen.count(it.key())) bad("unknown key '" + name + "." + it.key() + "'");
  }
};

}  // namespace

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig c;
  c.fed.model = ModelConfig{64, 4, 4, 8, 1};
  c.fed.data = DataSpec{4000, 8, 64, 0.25, 2};
  c.fed.clients = 10;
  c.fed.selection = 0.5;
  c.fed.rounds = 20;
  c.fed.local_epochs = 5;
  c.fed.local_lr = 1e-2;
  c.fed.local_batch = 16;
  c.codec_spec = desk_resnet2d_spec(canvas_rows(c.fed.model.layers, c.fed.model.rank),
                                    c.fed.model.dim);
  return c;
}

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    bad(std::string("not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) bad("top level must be an object");
  static const std::set<std::string> sections = {"model", "data", "fed", "codec", "privacy"};
  for (auto it = doc.begin(); it != doc.end(); ++it)
    if (!sections.count(it.key())) bad("unknown section '" + it.key() + "'");

  ExperimentConfig c = defaults();

  {
    Section s(doc, "model");
    long dim = c.fed.model.dim, layers = c.fed.model.layers, rank = c.fed.model.rank,
         classes = c.fed.model.n_classes;
    s.get("dim", dim);
    s.get("layers", layers);
    s.get("rank", rank);
    s.get("n_classes", classes);
    s.get("seed", c.fed.model.seed);
    s.finish();
    c.fed.model.dim = dim;
    c.fed.model.layers = layers;
    c.fed.model.rank = rank;
    c.fed.model.n_classes = classes;
    // the task dimensionality follows the model unless data overrides it
    c.fed.data.dim = dim;
    c.fed.data.n_classes = classes;
  }
  {
    Section s(doc, "data");
    long n = c.fed.data.n_samples, classes = c.fed.data.n_classes, dim = c.fed.data.dim;
    s.get("n_samples", n);
    s.get("n_classes", classes);
    s.get("dim", dim);
    s.get("spread", c.fed.data.spread);
    s.get("seed", c.fed.data.seed);
    s.finish();
    c.fed.data.n_samples = n;
    c.fed.data.n_classes = classes;
    c.fed.data.dim = dim;
  }
  {
    Section s(doc, "fed");
    long clients = c.fed.clients, batch = c.fed.local_batch, test = c.fed.test_samples;
    std::string aggregate = "sum", downlink = "plain";
    s.get("clients", clients);
    s.get("selection", c.fed.selection);
    s.get("rounds", c.fed.rounds);
    s.get("local_epochs", c.fed.local_epochs);
    s.get("local_lr", c.fed.local_lr);
    s.get("local_batch", batch);
    s.get("eta", c.fed.eta);
    s.get("aggregate", aggregate);
    s.get("downlink", downlink);
    s.get("threads", c.fed.threads);
    s.get("dirichlet_alpha", c.fed.dirichlet_alpha);
    s.get("capture_fraction", c.fed.capture_fraction);
    s.get("capture_selection", c.fed.capture_selection);
    s.get("capture_rounds", c.fed.capture_rounds);
    s.get("test_samples", test);
    s.get("partition_seed", c.fed.partition_seed);
    s.get("sample_seed", c.fed.sample_seed);
    s.get("train_seed", c.fed.train_seed);
    s.get("noise_seed", c.fed.noise_seed);
    s.finish();
    c.fed.clients = clients;
    c.fed.local_batch = batch;
    c.fed.test_samples = test;
    if (aggregate == "sum")
      c.fed.mean_aggregate = false;
    else if (aggregate == "mean")
      c.fed.mean_aggregate = true;
    else
      bad("key 'fed.aggregate' must be \"sum\" or \"mean\"");
    if (downlink == "plain")
      c.fed.downlink = DownlinkMode::kPlain;
    else if (downlink == "encoded")
      c.fed.downlink = DownlinkMode::kEncoded;
    else
      bad("key 'fed.downlink' must be \"plain\" or \"encoded\"");
  }
  {
    Section s(doc, "codec");
    std::string family = family_name(c.codec_spec.family);
    std::vector<int> channels = c.codec_spec.channels;
    int stages = c.codec_spec.stages, res = c.codec_spec.res_blocks,
        latent = c.codec_spec.latent_channels, kernel = c.codec_spec.kernel,
        fk = c.codec_spec.final_kernel;
    s.get("family", family);
    s.get("stages", stages);
    s.get("channels", channels);
    s.get("res_blocks", res);
    s.get("latent_channels", latent);
    s.get("kernel", kernel);
    s.get("final_kernel", fk);
    s.get("train_epochs", c.codec_train_epochs);
    s.get("train_lr", c.codec_train_lr);
    long tb = c.codec_train_batch;
    s.get("train_batch", tb);
    s.get("train_split", c.codec_split_fraction);
    s.get("split_seed", c.codec_split_seed);
    s.get("build_seed", c.codec_build_seed);
    s.finish();
    c.codec_train_batch = tb;

    const Index rows = canvas_rows(c.fed.model.layers, c.fed.model.rank);
    const Index cols = c.fed.model.dim;
    CodecSpec spec;
    spec.family = family_from_name(family);
    switch (spec.family) {
      case CodecFamily::kIdentity:
        spec.input_shape = {rows, cols};
        break;
      case CodecFamily::kCnn1d:
        spec.input_shape = {rows, 1, cols};
        break;
      default:
        spec.input_shape = {1, rows, cols};
        break;
    }
    spec.stages = stages;
    spec.channels = channels;
    spec.res_blocks = res;
    spec.latent_channels = latent;
    spec.kernel = kernel;
    spec.final_kernel = fk;
    c.codec_spec = spec;
  }
  {
    Section s(doc, "privacy");
    PrivacySpec ps;
    if (c.fed.privacy) ps = *c.fed.privacy;
    s.get("enabled", c.privacy_enabled);
    s.get("calibrate", c.privacy_calibrate);
    s.get("clip", ps.clip);
    s.get("sigma", ps.sigma);
    s.get("epsilon", ps.epsilon);
    s.get("delta", ps.delta);
    s.get("seed", ps.seed);
    s.finish();
    if (c.privacy_enabled) c.fed.privacy = ps;
  }
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) bad("cannot open " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return from_json_text(ss.str());
}

std::string ExperimentConfig::to_json() const {
  json doc;
  doc["model"] = {{"dim", fed.model.dim},
                  {"layers", fed.model.layers},
                  {"rank", fed.model.rank},
                  {"n_classes", fed.model.n_classes},
                  {"seed", fed.model.seed}};
  doc["data"] = {{"n_samples", fed.data.n_samples},
                 {"n_classes", fed.data.n_classes},
                 {"dim", fed.data.dim},
                 {"spread", fed.data.spread},
                 {"seed", fed.data.seed}};
  doc["fed"] = {{"clients", fed.clients},
                {"selection", fed.selection},
                {"rounds", fed.rounds},
                {"local_epochs", fed.local_epochs},
                {"local_lr", fed.local_lr},
                {"local_batch", fed.local_batch},
                {"eta", fed.eta},
                {"aggregate", fed.mean_aggregate ? "mean" : "sum"},
                {"downlink", fed.downlink == DownlinkMode::kPlain ? "plain" : "encoded"},
                {"threads", fed.threads},
                {"dirichlet_alpha", fed.dirichlet_alpha},
                {"capture_fraction", fed.capture_fraction},
                {"capture_selection", fed.capture_selection},
                {"capture_rounds", fed.capture_rounds},
                {"test_samples", fed.test_samples},
                {"partition_seed", fed.partition_seed},
                {"sample_seed", fed.sample_seed},
                {"train_seed", fed.train_seed},
                {"noise_seed", fed.noise_seed}};
  doc["codec"] = {{"family", family_name(codec_spec.family)},
                  {"stages", codec_spec.stages},
                  {"channels", codec_spec.channels},
                  {"res_blocks", codec_spec.res_blocks},
                  {"latent_channels", codec_spec.latent_channels},
                  {"kernel", codec_spec.kernel},
                  {"final_kernel", codec_spec.final_kernel},
                  {"train_epochs", codec_train_epochs},
                  {"train_lr", codec_train_lr},
                  {"train_batch", codec_train_batch},
                  {"train_split", codec_split_fraction},
                  {"split_seed", codec_split_seed},
                  {"build_seed", codec_build_seed}};
  PrivacySpec ps = fed.privacy ? *fed.privacy : PrivacySpec{};
  doc["privacy"] = {{"enabled", privacy_enabled}, {"calibrate", privacy_calibrate},
                    {"clip", ps.clip},           {"sigma", ps.sigma},
                    {"epsilon", ps.epsilon},     {"delta", ps.delta},
                    {"seed", ps.seed}};
  return doc.dump(2);
}

FedConfig ExperimentConfig::effective_fed() const {
  FedConfig f = fed;
  if (f.privacy) {
    PrivacySpec& ps = *f.privacy;
    ps.p = f.selection;
    ps.rounds = f.rounds;
    if (ps.sigma == 0.0) {
      if (!privacy_calibrate)
        bad("privacy enabled with sigma 0 and calibration disabled");
      ps.sigma = calibrate_sigma(ps.epsilon, ps.delta, f.selection, f.rounds);
    }
  }
  f.validate();
  if (codec_spec.family != CodecFamily::kUformer) {
    const Shape want = codec_spec.canvas_shape();
    const Index rows = canvas_rows(f.model.layers, f.model.rank);
    if (want != Shape{rows, f.model.dim})
      bad("codec input shape does not match the model canvas geometry");
  }
  return f;
}

}  // namespace cgfed
