#include "poolbert/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <fstream>
#include <functional>
#include <ostream>
#include <set>
#include <sstream>

#include "poolbert/checkpoint.hpp"
#include "poolbert/key_value.hpp"

namespace poolbert {

namespace fs = std::filesystem;

int exit_code_for(const std::exception& error) {
  if (const auto* p = dynamic_cast<const PipelineError*>(&error)) return p->exit_code();
  if (dynamic_cast<const ParameterError*>(&error)) return 1;
  if (dynamic_cast<const InputError*>(&error) || dynamic_cast<const FormatError*>(&error)) return 2;
  if (dynamic_cast<const fs::filesystem_error*>(&error) || dynamic_cast<const nlohmann::json::exception*>(&error)) {
    return 2;
  }
  return 3;
}

std::vector<std::string> read_corpus(const fs::path& path) {
  std::vector<std::string> texts;
  if (path.extension() == ".jsonl") {
    for (const VisitRecord& r : read_records(path)) texts.push_back(assemble_text(r));
    return texts;
  }
  std::ifstream in(path);
  if (!in) throw InputError("cannot read " + path.string());
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    texts.push_back(line);
  }
  return texts;
}

namespace {

std::string join_lines(const std::vector<std::string>& lines) {
  std::string out;
  for (const std::string& l : lines) out += l + "\n";
  return out;
}

void write_history(const fs::path& path, std::span<const HistoryEntry> history) {
  write_text_file(path, history_to_jsonl(history));
}

void add_model_parameters(Parameters& p, const ModelConfig& config, const std::string& prefix) {
  const KeyValues kv = KeyValues::parse(config.to_text());
  for (const auto& [k, v] : kv.entries()) p[prefix + k] = v;
}

void add_hparams(Parameters& p, const TrainHParams& hp, const std::string& prefix) {
  KeyValues kv;
  hp.write(kv, prefix);
  for (const auto& [k, v] : kv.entries()) p[k] = v;
}

std::string mode_name(LabelMode mode) { return mode == LabelMode::root ? "root" : "extended"; }

void add_label_options(Parameters& p, const LabelSpaceOptions& o, const std::string& prefix) {
  p[prefix + "mode"] = mode_name(o.mode);
  if (o.top_k) p[prefix + "top_k"] = std::to_string(*o.top_k);
  if (o.coverage) p[prefix + "coverage"] = format_double(*o.coverage);
  p[prefix + "extended_k"] = std::to_string(o.extended_k);
}

void add_synth_spec(Parameters& p, const SyntheticSpec& s, const std::string& prefix) {
  p[prefix + "classes"] = std::to_string(s.num_classes);
  p[prefix + "keywords_per_class"] = std::to_string(s.keywords_per_class);
  p[prefix + "noise_vocab_size"] = std::to_string(s.noise_vocab_size);
  p[prefix + "skew"] = format_double(s.skew);
  p[prefix + "train"] = std::to_string(s.train_size);
  p[prefix + "test"] = std::to_string(s.test_size);
  p[prefix + "seed"] = std::to_string(s.seed);
  p[prefix + "test_shift"] = s.test_shift ? "true" : "false";
}

std::vector<std::string> texts_of(std::span<const VisitRecord> records) {
  std::vector<std::string> out;
  out.reserve(records.size());
  for (const VisitRecord& r : records) out.push_back(assemble_text(r));
  return out;
}


}  // namespace

Parameters SynthCommand::parameters() const {
  Parameters p;
  add_synth_spec(p, spec, "");
  p["out"] = out_dir.string();
  return p;
}

std::vector<fs::path> SynthCommand::outputs() const {
  return {out_dir / "train.jsonl", out_dir / "test.jsonl", out_dir / "labels.txt", out_dir / "corpus.txt"};
}

void SynthCommand::run() const {
  const SyntheticData data = generate_synthetic(spec);
  fs::create_directories(out_dir);
  write_records(out_dir / "train.jsonl", data.train);
  write_records(out_dir / "test.jsonl", data.test);
  LabelSpace::build(data.train, {}).save(out_dir / "labels.txt");
  write_text_file(out_dir / "corpus.txt", join_lines(texts_of(data.train)));
}

Parameters TokenizerCommand::parameters() const {
  return {{"input", input.string()},
          {"vocab_size", std::to_string(options.vocab_size)},
          {"min_freq", std::to_string(options.min_frequency)},
          {"out", out.string()}};
}

void TokenizerCommand::run() const {
  const std::vector<std::string> corpus = read_corpus(input);
  const Vocab vocab = train_vocab(corpus, options);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  vocab.save(out);
}

Parameters LabelsCommand::parameters() const {
  Parameters p{{"data", data.string()}, {"out", out.string()}};
  add_label_options(p, options, "");
  return p;
}

LabelSpace LabelsCommand::run() const {
  const LabelSpace space = LabelSpace::build(read_records(data), options);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  space.save(out);
  return space;
}

Parameters PretrainCommand::parameters() const {
  Parameters p{{"data", data.string()}, {"vocab", vocab.string()}, {"out", out.string()},
               {"history", history.string()}};
  add_model_parameters(p, config, "model.");
  add_hparams(p, hp, "");
  return p;
}

PretrainResult PretrainCommand::run(const HistorySink& sink) const {
  const std::vector<std::string> texts = read_corpus(data);
  const Vocab v = Vocab::load(vocab);
  ModelConfig c = config;
  c.vocab_size = v.size();
  c.head_kind = HeadKind::mlm;
  c.validate();
  PretrainResult result = pretrain_mlm(texts, v, c, hp, sink);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_checkpoint(result.model, out);
  write_history(history, result.history);
  return result;
}

Parameters FinetuneCommand::parameters() const {
  Parameters p{{"data", data.string()},         {"labels", labels.string()}, {"vocab", vocab.string()},
               {"head", std::string(to_string(head))}, {"out", out.string()},       {"history", history.string()}};
  if (val) p["val"] = val->string();
  if (init) {
    p["init"] = init->string();
  } else {
    p["init"] = "fresh";
    add_model_parameters(p, config, "model.");
  }
  add_hparams(p, hp, "");
  return p;
}

FinetuneResult FinetuneCommand::run(const HistorySink& sink) const {
  const Vocab v = Vocab::load(vocab);
  const LabelSpace space = LabelSpace::load(labels);
  const std::vector<VisitRecord> train_all = read_records(data);
  const std::vector<VisitRecord> val_all = val ? read_records(*val) : std::vector<VisitRecord>{};
  const LabeledRecords train = apply_label_space(train_all, space);
  const LabeledRecords validation = apply_label_space(val_all, space);

  std::optional<Model> start;
  ModelConfig c = config;
  c.vocab_size = v.size();
  if (init) {
    start.emplace(load_checkpoint(*init));
    c = start->config();
  }
  c.head_kind = head;

  std::vector<HistoryEntry> prefix{{0, "train", "records", static_cast<double>(train.records.size())},
                                   {0, "train", "excluded_records", static_cast<double>(train.excluded.size())}};
  if (val) {
    prefix.push_back({0, "val", "records", static_cast<double>(validation.records.size())});
    prefix.push_back({0, "val", "excluded_records", static_cast<double>(validation.excluded.size())});
  }
  if (sink) {
    for (const HistoryEntry& h : prefix) sink(h);
  }
  FinetuneResult result = finetune(train.records, validation.records, space, v, c, start ? &*start : nullptr, hp, sink);
  result.history.insert(result.history.begin(), prefix.begin(), prefix.end());
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_checkpoint(result.model, out);
  write_history(history, result.history);
  return result;
}

Parameters EvaluateCommand::parameters() const {
  Parameters p{{"model", model.string()}, {"vocab", vocab.string()}, {"labels", labels.string()},
               {"data", data.string()},   {"out", out.string()},     {"length_threshold", std::to_string(length_threshold)}};
  if (by_length) p["by_length"] = by_length->string();
  if (predictions) p["predictions"] = predictions->string();
  return p;
}

std::vector<fs::path> EvaluateCommand::outputs() const {
  std::vector<fs::path> o{out};
  if (by_length) o.push_back(*by_length);
  if (predictions) o.push_back(*predictions);
  return o;
}

MetricsReport EvaluateCommand::run() const {
  const Model m = load_checkpoint(model);
  if (m.config().head_kind == HeadKind::mlm) throw InputError(model.string() + " holds an mlm model, not a classifier");
  const Vocab v = Vocab::load(vocab);
  const LabelSpace space = LabelSpace::load(labels);
  if (space.size() != m.config().num_classes) {
    throw InputError("label file has " + std::to_string(space.size()) + " codes but the model predicts " +
                     std::to_string(m.config().num_classes));
  }
  const LabeledRecords records = apply_label_space(read_records(data), space);
  if (records.records.empty()) throw InputError(data.string() + ": no records inside the label space");
  const std::vector<ScoredPrediction> scored = score_records(m, records.records, space, v);
  MetricsReport report = compute_metrics(scored, space.size());
  const std::vector<std::size_t> edges = default_length_edges();
  report.by_length = metrics_by_length(scored, edges, length_threshold);

  nlohmann::ordered_json j = metrics_to_json(report, space.codes());
  j["excluded_records"] = records.excluded.size();
  write_text_file(out, j.dump(2) + "\n");
  if (by_length) write_text_file(*by_length, length_report_csv(*report.by_length));
  if (predictions) {
    std::string lines;
    for (const ScoredPrediction& s : scored) {
      nlohmann::ordered_json row;
      row["visit_id"] = s.visit_id;
      row["truth"] = space.code(s.truth_index);
      nlohmann::ordered_json codes = nlohmann::ordered_json::array(), probs = nlohmann::ordered_json::array();
      for (std::size_t k : top_n(s.scores, std::min<std::size_t>(3, s.scores.size()))) {
        codes.push_back(space.code(k));
        probs.push_back(s.scores[k]);
      }
      row["codes"] = codes;
      row["probabilities"] = probs;
      lines += row.dump() + "\n";
    }
    write_text_file(*predictions, lines);
  }
  return report;
}

std::vector<Prediction> predict_texts(const Model& model, const Vocab& vocab, const LabelSpace& labels,
                                      std::span<const std::string> texts, std::size_t top_n_codes,
                                      std::size_t min_tokens) {
  const std::size_t K = model.config().num_classes;
  if (model.config().head_kind == HeadKind::mlm) throw InputError("predict needs a classifier checkpoint");
  if (labels.size() != K) {
    throw InputError("label file has " + std::to_string(labels.size()) + " codes but the model predicts " +
                     std::to_string(K));
  }
  if (top_n_codes < 1 || top_n_codes > K) {
    throw ParameterError("top_n must be between 1 and " + std::to_string(K));
  }
  std::vector<Encoding> encodings;
  encodings.reserve(texts.size());
  for (const std::string& t : texts) encodings.push_back(encode(t, vocab, model.config().max_seq_len));
  const std::vector<std::vector<double>> probs = predict_probabilities(model, encodings);
  std::vector<Prediction> out(texts.size());
  for (std::size_t i = 0; i < texts.size(); ++i) {
    for (std::size_t k : top_n(probs[i], top_n_codes)) out[i].codes.push_back({labels.code(k), probs[i][k]});
    out[i].token_count = encodings[i].word_pieces;
    out[i].low_confidence = out[i].token_count < min_tokens;
  }
  return out;
}

nlohmann::ordered_json prediction_to_json(const Prediction& p) {
  nlohmann::ordered_json j;
  nlohmann::ordered_json codes = nlohmann::ordered_json::array(), probs = nlohmann::ordered_json::array();
  for (const RankedCode& c : p.codes) {
    codes.push_back(c.code);
    probs.push_back(c.probability);
  }
  j["codes"] = codes;
  j["probabilities"] = probs;
  j["tokens"] = p.token_count;
  j["low_confidence"] = p.low_confidence;
  return j;
}

namespace {

std::vector<std::string> split_csv(std::string_view line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    fields.emplace_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return fields;
}

bool is_unsigned(std::string_view s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
}

bool is_number(std::string_view s) {
  double v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  return !s.empty() && ec == std::errc() && ptr == s.data() + s.size();
}

}  // namespace

std::string merge_length_table(std::string_view csv, std::string_view source) {
  std::istringstream in{std::string(csv)};
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& msg) {
    throw ParseError(std::string(source) + ":" + std::to_string(line_no) + ": " + msg);
  };
  std::string out = "bin,count,hit_at_3\n";
  bool header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!header) {
      if (line != "bin_start,bin_end,count,hit_at_3") fail("expected header bin_start,bin_end,count,hit_at_3");
      header = true;
      continue;
    }
    if (line.empty()) continue;
    const std::vector<std::string> f = split_csv(line);
    if (f.size() != 4) fail("expected 4 fields, got " + std::to_string(f.size()));
    if (!is_unsigned(f[0])) fail("bin_start '" + f[0] + "' is not a non-negative integer");
    if (f[1] != "inf" && !is_unsigned(f[1])) fail("bin_end '" + f[1] + "' is not an integer or inf");
    if (!is_unsigned(f[2])) fail("count '" + f[2] + "' is not a non-negative integer");
    if (!f[3].empty() && !is_number(f[3])) fail("hit_at_3 '" + f[3] + "' is not a number");
    out += f[0] + "-" + f[1] + "," + f[2] + "," + f[3] + "\n";
  }
  if (!header) throw ParseError(std::string(source) + ": empty file");
  return out;
}

std::string length_table_svg(std::string_view table) {
  struct Row {
    std::string bin;
    double count = 0;
    std::optional<double> hit;
  };
  std::vector<Row> rows;
  std::istringstream in{std::string(table)};
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::vector<std::string> f = split_csv(line);
    if (f.size() != 3) throw ParseError("merged length table: expected 3 fields");
    Row r{f[0], std::stod(f[1]), std::nullopt};
    if (!f[2].empty()) r.hit = std::stod(f[2]);
    rows.push_back(r);
  }
  const double width = 40.0 * static_cast<double>(std::max<std::size_t>(rows.size(), 1)) + 80, height = 300;
  const double plot_h = 220, left = 50, top = 30, bar = 30;
  double max_count = 1;
  for (const Row& r : rows) max_count = std::max(max_count, r.count);
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
  svg << "<text x=\"" << left << "\" y=\"18\" font-size=\"12\">samples per length bin (bars) and Hit@3 (line)</text>\n";
  std::string points;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double x = left + 40.0 * static_cast<double>(i);
    const double h = plot_h * rows[i].count / max_count;
    svg << "<rect x=\"" << x << "\" y=\"" << top + plot_h - h << "\" width=\"" << bar << "\" height=\"" << h
        << "\" fill=\"black\"/>\n";
    svg << "<text x=\"" << x << "\" y=\"" << top + plot_h + 14 << "\" font-size=\"8\">" << rows[i].bin << "</text>\n";
    if (rows[i].hit) {
      points += std::to_string(x + bar / 2) + "," + std::to_string(top + plot_h * (1.0 - *rows[i].hit)) + " ";
    }
  }
  if (!points.empty()) svg << "<polyline fill=\"none\" stroke=\"red\" stroke-width=\"2\" points=\"" << points << "\"/>\n";
  svg << "</svg>\n";
  return svg.str();
}

PipelineConfig PipelineConfig::parse(const KeyValues& kv, const fs::path& base_dir) {
  static const std::set<std::string> kHparamKeys = {
      "batch_size", "epochs", "learning_rate", "weight_decay", "adam_beta1",  "adam_beta2",     "adam_eps",
      "dropout_rate", "loss", "mask_rate",   "seed",         "lr_schedule", "warmup_fraction"};
  static const std::set<std::string> kModelKeys = {"num_layers",   "hidden_size", "num_heads",      "ff_size",
                                                   "max_positions", "max_seq_len", "num_segments",   "dropout_rate",
                                                   "layer_norm_eps", "gelu"};
  static const std::set<std::string> kPlainKeys = {
      "out_dir",        "seed",         "synth.classes",    "synth.keywords_per_class", "synth.noise_vocab_size",
      "synth.skew",     "synth.train",  "synth.test",       "synth.seed",               "synth.test_shift",
      "data.val_fraction", "labels.mode", "labels.top_k",   "labels.coverage",          "labels.extended_k",
      "tokenizer.vocab_size", "tokenizer.min_freq", "pretrain.enabled", "finetune.head", "finetune.init",
      "evaluate.length_threshold"};
  std::string model_text;
  for (const auto& [key, value] : kv.entries()) {
    if (kPlainKeys.count(key)) continue;
    if (key.starts_with("model.") && kModelKeys.count(key.substr(6))) {
      model_text += key.substr(6) + "=" + value + "\n";
      continue;
    }
    if (key.starts_with("pretrain.") && kHparamKeys.count(key.substr(9))) continue;
    if (key.starts_with("finetune.") && kHparamKeys.count(key.substr(9))) continue;
    throw ParseError("pipeline config: unknown key '" + key + "'");
  }

  PipelineConfig c;
  const fs::path out = kv.get_string("out_dir", "run");
  c.out_dir = out.is_absolute() ? out : base_dir / out;
  c.seed = kv.get_u64("seed", c.seed);

  c.synth.num_classes = kv.get_size("synth.classes", c.synth.num_classes);
  c.synth.keywords_per_class = kv.get_size("synth.keywords_per_class", c.synth.keywords_per_class);
  c.synth.noise_vocab_size = kv.get_size("synth.noise_vocab_size", c.synth.noise_vocab_size);
  c.synth.skew = kv.get_double("synth.skew", c.synth.skew);
  c.synth.train_size = kv.get_size("synth.train", c.synth.train_size);
  c.synth.test_size = kv.get_size("synth.test", c.synth.test_size);
  c.synth.seed = kv.get_u64("synth.seed", c.seed);
  c.synth.test_shift = kv.get_bool("synth.test_shift", c.synth.test_shift);
  c.synth.validate();

  c.val_fraction = kv.get_double("data.val_fraction", c.val_fraction);
  if (!(c.val_fraction > 0.0 && c.val_fraction < 1.0)) {
    throw ParameterError("pipeline config: data.val_fraction must be in (0, 1)");
  }
  const std::string mode = kv.get_string("labels.mode", "root");
  if (mode != "root" && mode != "extended") throw ParseError("pipeline config: labels.mode must be root or extended");
  c.labels.mode = mode == "root" ? LabelMode::root : LabelMode::extended;
  if (kv.contains("labels.top_k")) c.labels.top_k = kv.get_size("labels.top_k", 0);
  if (kv.contains("labels.coverage")) c.labels.coverage = kv.get_double("labels.coverage", 0.0);
  c.labels.extended_k = kv.get_size("labels.extended_k", c.labels.extended_k);

  c.tokenizer.vocab_size = kv.get_size("tokenizer.vocab_size", c.tokenizer.vocab_size);
  c.tokenizer.min_frequency = kv.get_size("tokenizer.min_freq", c.tokenizer.min_frequency);

  c.model = ModelConfig::from_text(model_text, "pipeline config");

  TrainHParams base;
  base.seed = c.seed;
  base.epochs = 3;
  c.pretrain_enabled = kv.get_bool("pretrain.enabled", true);
  c.pretrain = TrainHParams::read(kv, "pretrain.", base);
  c.finetune = TrainHParams::read(kv, "finetune.", base);
  c.head = parse_head_kind(kv.get_string("finetune.head", "rupool"));
  if (c.head == HeadKind::mlm) throw ParseError("pipeline config: finetune.head must be cls or rupool");
  if (kv.contains("finetune.init")) {
    const fs::path init = kv.get_string("finetune.init", "");
    c.finetune_init = init.is_absolute() ? init : base_dir / init;
  }
  c.length_threshold = kv.get_size("evaluate.length_threshold", c.length_threshold);

  Parameters& r = c.resolved;
  r["out_dir"] = c.out_dir.string();
  r["seed"] = std::to_string(c.seed);
  add_synth_spec(r, c.synth, "synth.");
  r["data.val_fraction"] = format_double(c.val_fraction);
  add_label_options(r, c.labels, "labels.");
  r["tokenizer.vocab_size"] = std::to_string(c.tokenizer.vocab_size);
  r["tokenizer.min_freq"] = std::to_string(c.tokenizer.min_frequency);
  add_model_parameters(r, c.model, "model.");
  r.erase("model.vocab_size");
  r.erase("model.num_classes");
  r.erase("model.head_kind");
  r["pretrain.enabled"] = c.pretrain_enabled ? "true" : "false";
  add_hparams(r, c.pretrain, "pretrain.");
  r["finetune.head"] = std::string(to_string(c.head));
  if (c.finetune_init) r["finetune.init"] = c.finetune_init->string();
  add_hparams(r, c.finetune, "finetune.");
  r["evaluate.length_threshold"] = std::to_string(c.length_threshold);
  return c;
}

PipelineConfig PipelineConfig::load(const fs::path& path) {
  const KeyValues kv = KeyValues::load(path);
  return parse(kv, fs::absolute(path).parent_path());
}

namespace {

struct Stage {
  std::string name;
  bool enabled = true;
  std::vector<std::string> parameter_prefixes;
  std::vector<fs::path> inputs;   // absolute
  std::vector<fs::path> outputs;  // absolute, inside out_dir
  std::function<void()> run;
};

fs::path record_path(const fs::path& out_dir, const std::string& stage) {
  return out_dir / ".stages" / (stage + ".json");
}

std::string relative_name(const fs::path& p, const fs::path& out_dir) {
  const fs::path rel = p.lexically_relative(out_dir);
  return rel.empty() || rel.native().starts_with("..") ? p.string() : rel.generic_string();
}

std::string stage_key(const Stage& s, const Parameters& params, const fs::path& out_dir) {
  std::string text = "stage=" + s.name + "\n";
  for (const auto& [k, v] : params) {
    const bool wanted = std::any_of(s.parameter_prefixes.begin(), s.parameter_prefixes.end(),
                                    [&](const std::string& prefix) { return k == prefix || k.starts_with(prefix); });
    if (wanted) text += k + "=" + v + "\n";
  }
  for (const fs::path& in : s.inputs) text += "input " + relative_name(in, out_dir) + "=" + sha256_file(in) + "\n";
  return sha256_hex(text);
}

std::optional<nlohmann::json> read_record(const fs::path& path) {
  if (!fs::is_regular_file(path)) return std::nullopt;
  nlohmann::json j = nlohmann::json::parse(read_text_file(path), nullptr, false);
  if (j.is_discarded() || !j.is_object()) return std::nullopt;
  return j;
}

bool record_matches(const fs::path& path, const std::string& key, const Stage& s, const fs::path& out_dir) {
  const auto record = read_record(path);
  if (!record || record->value("status", "") != "complete" || record->value("input_key", "") != key) return false;
  const auto outputs = record->find("outputs");
  if (outputs == record->end() || !outputs->is_object()) return false;
  for (const fs::path& o : s.outputs) {
    const auto it = outputs->find(relative_name(o, out_dir));
    if (it == outputs->end() || !fs::is_regular_file(o) || sha256_file(o) != it->get<std::string>()) return false;
  }
  return true;
}

void mark_stale(const fs::path& path, const std::string& reason) {
  auto record = read_record(path);
  if (!record) return;
  (*record)["status"] = "stale";
  (*record)["stale_reason"] = reason;
  write_text_file(path, record->dump(2) + "\n");
}

}  // namespace

PipelineResult run_pipeline(const PipelineConfig& config, bool force, std::ostream* log) {
  const auto started = std::chrono::steady_clock::now();
  const fs::path out = config.out_dir;
  fs::create_directories(out / ".stages");

  const fs::path data = out / "data";
  const fs::path train = data / "train.jsonl", val = data / "val.jsonl", test = data / "test.jsonl";
  const fs::path labels = data / "labels.txt", corpus = data / "corpus.txt";
  const fs::path vocab = out / "tokenizer" / "vocab.txt";
  const fs::path pretrained = out / "pretrain" / "model.ckpt", pretrain_history = out / "pretrain" / "history.jsonl";
  const fs::path finetuned = out / "finetune" / "model.ckpt", finetune_history = out / "finetune" / "history.jsonl";
  const fs::path metrics = out / "evaluate" / "metrics.json", by_length = out / "evaluate" / "by_length.csv";
  const fs::path predictions = out / "evaluate" / "predictions.jsonl";

  std::optional<fs::path> init;
  if (config.finetune_init) {
    init = *config.finetune_init;
  } else if (config.pretrain_enabled) {
    init = pretrained;
  }

  PipelineResult result;
  std::vector<Stage> stages;
  stages.push_back({"synth", true, {"seed", "synth.", "data.", "labels."}, {}, {train, val, test, labels, corpus},
                    [&] {
                      const SyntheticData d = generate_synthetic(config.synth);
                      const auto [tr, va] = split_train_val(d.train, 1.0 - config.val_fraction, config.seed);
                      fs::create_directories(data);
                      write_records(train, tr);
                      write_records(val, va);
                      write_records(test, d.test);
                      LabelSpace::build(tr, config.labels).save(labels);
                      write_text_file(corpus, join_lines(texts_of(tr)));
                    }});
  stages.push_back({"tokenizer", true, {"tokenizer."}, {corpus}, {vocab}, [&] {
                      TokenizerCommand{corpus, config.tokenizer, vocab}.run();
                    }});
  stages.push_back({"pretrain", config.pretrain_enabled && !config.finetune_init, {"model.", "pretrain."},
                    {corpus, vocab}, {pretrained, pretrain_history}, [&] {
                      PretrainCommand{corpus, vocab, config.model, config.pretrain, pretrained, pretrain_history}.run();
                    }});
  std::vector<fs::path> finetune_inputs{train, val, labels, vocab};
  if (init) finetune_inputs.push_back(*init);
  stages.push_back({"finetune", true, {"model.", "finetune."}, finetune_inputs, {finetuned, finetune_history}, [&] {
                      FinetuneCommand{train,  val,           labels,          vocab,    init,
                                      config.model, config.head, config.finetune, finetuned, finetune_history}
                          .run();
                    }});
  stages.push_back({"evaluate", true, {"evaluate."}, {finetuned, vocab, labels, test},
                    {metrics, by_length, predictions}, [&] {
                      EvaluateCommand e{finetuned, vocab, labels, test, metrics, by_length, predictions,
                                        config.length_threshold};
                      result.report = e.run();
                    }});

  for (std::size_t i = 0; i < stages.size(); ++i) {
    const Stage& stage = stages[i];
    const fs::path record = record_path(out, stage.name);
    if (!stage.enabled) {
      fs::remove(record);
      if (log) *log << "[" << stage.name << "] disabled\n";
      continue;
    }
    const auto t0 = std::chrono::steady_clock::now();
    try {
      const std::string key = stage_key(stage, config.resolved, out);
      if (!force && record_matches(record, key, stage, out)) {
        result.stages.push_back({stage.name, StageStatus::skipped, 0.0});
        if (log) *log << "[" << stage.name << "] up to date, skipped\n";
        continue;
      }
      nlohmann::ordered_json running;
      running["stage"] = stage.name;
      running["status"] = "running";
      running["input_key"] = key;
      write_text_file(record, running.dump(2) + "\n");
      if (log) *log << "[" << stage.name << "] running\n" << std::flush;
      stage.run();
      nlohmann::ordered_json done;
      done["stage"] = stage.name;
      done["status"] = "complete";
      done["input_key"] = key;
      nlohmann::ordered_json hashes;
      for (const fs::path& o : stage.outputs) hashes[relative_name(o, out)] = sha256_file(o);
      done["outputs"] = hashes;
      write_text_file(record, done.dump(2) + "\n");
    } catch (const std::exception& e) {
      nlohmann::ordered_json failed;
      failed["stage"] = stage.name;
      failed["status"] = "failed";
      failed["error"] = e.what();
      nlohmann::ordered_json stale = nlohmann::ordered_json::array();
      for (const fs::path& o : stage.outputs) {
        if (fs::exists(o)) stale.push_back(relative_name(o, out));
      }
      failed["stale_outputs"] = stale;
      write_text_file(record, failed.dump(2) + "\n");
      for (std::size_t j = i + 1; j < stages.size(); ++j) {
        mark_stale(record_path(out, stages[j].name), "upstream stage " + stage.name + " failed");
      }
      throw PipelineError(stage.name, e.what(), exit_code_for(e));
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.stages.push_back({stage.name, StageStatus::ran, seconds});
    if (log) *log << "[" << stage.name << "] done in " << format_double(std::round(seconds * 10) / 10) << " s\n";
  }

  if (std::none_of(result.stages.begin(), result.stages.end(),
                   [](const StageOutcome& s) { return s.name == "evaluate" && s.status == StageStatus::ran; })) {
    // Evaluate was cached; recover its report from disk for the caller.
    const nlohmann::json j = nlohmann::json::parse(read_text_file(metrics));
    result.report.samples = j.at("samples").get<std::size_t>();
    result.report.hit_at_1 = j.at("hit@1").get<double>();
    result.report.hit_at_3 = j.at("hit@3").get<double>();
    result.report.hit_at_5 = j.at("hit@5").get<double>();
    result.report.hit_at_10 = j.at("hit@10").get<double>();
    result.report.mrr = j.at("mrr").get<double>();
    result.report.f1.macro = j.at("f1_macro").get<double>();
    result.report.f1.weighted = j.at("f1_weighted").get<double>();
  }
  result.metrics = metrics;

  RunManifest manifest;
  manifest.command = "pipeline run";
  manifest.parameters = config.resolved;
  manifest.seeds = {{"seed", config.seed},
                    {"synth", config.synth.seed},
                    {"pretrain", config.pretrain.seed},
                    {"finetune", config.finetune.seed}};
  if (config.finetune_init) manifest.inputs.push_back(config.finetune_init->string());
  for (const Stage& s : stages) {
    if (!s.enabled) continue;
    for (const fs::path& o : s.outputs) manifest.outputs.push_back(o.string());
  }
  manifest.duration_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  manifest.hash_files();
  manifest.write(out / "manifest.json");
  return result;
}

}  // namespace poolbert
