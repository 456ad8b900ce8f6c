// poolbert command-line entry point. Exit codes: 0 success, 1 usage error,
// 2 data/format error, 3 internal invariant violation.
#include <chrono>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "poolbert/checkpoint.hpp"
#include "poolbert/manifest.hpp"
#include "poolbert/panel.hpp"
#include "poolbert/pipeline.hpp"

namespace fs = std::filesystem;
using namespace poolbert;

namespace {

using Clock = std::chrono::steady_clock;

void write_manifest(const std::string& command, const Parameters& params, std::map<std::string, std::uint64_t> seeds,
                    const std::vector<fs::path>& inputs, const std::vector<fs::path>& outputs,
                    const fs::path& manifest_path, Clock::time_point started) {
  RunManifest m;
  m.command = command;
  m.parameters = params;
  m.seeds = std::move(seeds);
  for (const fs::path& p : inputs) m.inputs.push_back(p.string());
  for (const fs::path& p : outputs) m.outputs.push_back(p.string());
  m.duration_seconds = std::chrono::duration<double>(Clock::now() - started).count();
  m.hash_files();
  m.write(manifest_path);
}

void print_history(const HistoryEntry& h) {
  std::cerr << "epoch " << h.epoch << " " << h.split << " " << h.metric << " = " << format_double(h.value) << "\n";
}

std::optional<fs::path> optional_path(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return fs::path(s);
}

fs::path default_history(const fs::path& out, const std::string& flag) {
  if (!flag.empty()) return flag;
  fs::path p = out;
  p += ".history.jsonl";
  return p;
}

struct TrainFlags {
  std::optional<std::size_t> epochs, batch;
  std::optional<double> lr, dropout, mask_rate;
  std::optional<std::uint64_t> seed;
  std::string loss, schedule;

  void add(CLI::App* cmd, bool mlm) {
    cmd->add_option("--epochs", epochs, "Training epochs");
    cmd->add_option("--lr", lr, "Learning rate (AdamW)");
    cmd->add_option("--batch", batch, "Batch size");
    cmd->add_option("--seed", seed, "Random seed for initialisation, shuffling and dropout");
    cmd->add_option("--dropout", dropout, "Dropout rate overriding the model config");
    cmd->add_option("--lr-schedule", schedule, "constant or linear_warmup_decay")
        ->check(CLI::IsMember({"constant", "linear_warmup_decay"}));
    if (mlm) {
      cmd->add_option("--mask-rate", mask_rate, "Fraction of tokens selected for masking");
    } else {
      cmd->add_option("--loss", loss, "bce (sigmoid + binary cross-entropy) or softmax-ce")
          ->check(CLI::IsMember({"bce", "softmax-ce"}));
    }
  }

  TrainHParams resolve(TrainHParams hp) const {
    if (epochs) hp.epochs = *epochs;
    if (batch) hp.batch_size = *batch;
    if (lr) hp.learning_rate = *lr;
    if (dropout) hp.dropout_rate = *dropout;
    if (mask_rate) hp.mask_rate = *mask_rate;
    if (seed) hp.seed = *seed;
    if (!loss.empty()) hp.loss_kind = parse_loss_kind(loss);
    if (!schedule.empty()) hp.lr_schedule = parse_lr_schedule(schedule);
    hp.validate();
    return hp;
  }
};

ModelConfig config_or_toy(const std::string& path) {
  return path.empty() ? ModelConfig::toy() : ModelConfig::load(path);
}

int run(int argc, char** argv) {
  CLI::App app{"poolbert: BERT-style diagnosis prediction with CLS and RuPool heads"};
  app.require_subcommand(1);
  const auto started = Clock::now();
  std::function<void()> action;

  // tokenizer train
  CLI::App* tokenizer = app.add_subcommand("tokenizer", "Tokenizer commands");
  tokenizer->require_subcommand(1);
  CLI::App* tok_train = tokenizer->add_subcommand("train", "Train a WordPiece vocabulary");
  TokenizerCommand tok;
  std::string tok_input, tok_out;
  tok_train->add_option("--input", tok_input, "Corpus: text file with one document per line, or visit JSONL")
      ->required();
  tok_train->add_option("--vocab-size", tok.options.vocab_size, "Target vocabulary size incl. 5 specials")
      ->capture_default_str();
  tok_train->add_option("--min-freq", tok.options.min_frequency, "Minimum pair frequency for a merge")
      ->capture_default_str();
  tok_train->add_option("--out", tok_out, "Output vocab.txt (one token per line)")->required();
  tok_train->callback([&] {
    action = [&] {
      tok.input = tok_input;
      tok.out = tok_out;
      tok.run();
      write_manifest("tokenizer train", tok.parameters(), {}, {tok.input}, {tok.out}, manifest_path_for(tok.out),
                     started);
      std::cerr << "wrote " << tok.out.string() << " (" << Vocab::load(tok.out).size() << " tokens)\n";
    };
  });

  // synth
  CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic clinical-style dataset");
  SynthCommand syn;
  std::string syn_out;
  synth->add_option("--classes", syn.spec.num_classes, "Number of diagnosis classes")->capture_default_str();
  synth->add_option("--train", syn.spec.train_size, "Training visits")->capture_default_str();
  synth->add_option("--test", syn.spec.test_size, "Test visits")->capture_default_str();
  synth->add_option("--skew", syn.spec.skew, "Zipf exponent of class frequencies (0 = uniform)")
      ->capture_default_str();
  synth->add_option("--seed", syn.spec.seed, "Random seed")->capture_default_str();
  synth->add_option("--keywords-per-class", syn.spec.keywords_per_class, "Keywords owned by each class")
      ->capture_default_str();
  synth->add_option("--noise-vocab", syn.spec.noise_vocab_size, "Size of the shared noise vocabulary")
      ->capture_default_str();
  synth->add_flag("--test-shift", syn.spec.test_shift, "Draw test noise from a separate vocabulary");
  synth->add_option("--out", syn_out, "Output directory")->required();
  synth->callback([&] {
    action = [&] {
      syn.out_dir = syn_out;
      syn.spec.validate();
      syn.run();
      write_manifest("synth", syn.parameters(), {{"seed", syn.spec.seed}}, {}, syn.outputs(),
                     syn.out_dir / "manifest.json", started);
      std::cerr << "wrote " << syn.spec.train_size << " train / " << syn.spec.test_size << " test visits to "
                << syn.out_dir.string() << "\n";
    };
  });

  // labels build
  CLI::App* labels = app.add_subcommand("labels", "Label-space commands");
  labels->require_subcommand(1);
  CLI::App* labels_build = labels->add_subcommand("build", "Select the label space from training visits");
  LabelsCommand lab;
  std::string lab_data, lab_out, lab_mode = "root";
  std::optional<std::size_t> lab_top_k;
  std::optional<double> lab_coverage;
  labels_build->add_option("--data", lab_data, "Training visits (JSONL)")->required();
  labels_build->add_option("--top-k", lab_top_k, "Keep at most this many root codes");
  labels_build->add_option("--coverage", lab_coverage, "Smallest prefix of codes covering this share of visits");
  labels_build->add_option("--mode", lab_mode, "root or extended")->check(CLI::IsMember({"root", "extended"}))
      ->capture_default_str();
  labels_build->add_option("--extended-k", lab.options.extended_k, "Exact codes kept in extended mode")
      ->capture_default_str();
  labels_build->add_option("--out", lab_out, "Output label file (one code per line)")->required();
  labels_build->callback([&] {
    action = [&] {
      lab.data = lab_data;
      lab.out = lab_out;
      lab.options.top_k = lab_top_k;
      lab.options.coverage = lab_coverage;
      lab.options.mode = lab_mode == "root" ? LabelMode::root : LabelMode::extended;
      const LabelSpace space = lab.run();
      write_manifest("labels build", lab.parameters(), {}, {lab.data}, {lab.out}, manifest_path_for(lab.out), started);
      std::cerr << space.size() << " codes covering " << format_double(space.coverage()) << " of visits\n";
      if (!space.coverage_target_met()) std::cerr << "warning: coverage target not reached within top-k\n";
    };
  });

  // pretrain
  CLI::App* pretrain = app.add_subcommand("pretrain", "Masked-LM pretraining of the encoder");
  std::string pre_data, pre_vocab, pre_config, pre_out, pre_history;
  TrainFlags pre_flags;
  pretrain->add_option("--data", pre_data, "Corpus: visit JSONL or text file, one document per line")->required();
  pretrain->add_option("--vocab", pre_vocab, "Vocabulary file")->required();
  pretrain->add_option("--config", pre_config, "Model config (key=value); toy defaults when omitted");
  pretrain->add_option("--out", pre_out, "Output checkpoint")->required();
  pretrain->add_option("--history", pre_history, "Loss history JSONL (default <out>.history.jsonl)");
  pre_flags.add(pretrain, true);
  pretrain->callback([&] {
    action = [&] {
      TrainHParams base;
      base.epochs = 3;
      PretrainCommand cmd{pre_data, pre_vocab, config_or_toy(pre_config), pre_flags.resolve(base), pre_out,
                          default_history(pre_out, pre_history)};
      const PretrainResult r = cmd.run(print_history);
      std::vector<fs::path> inputs{cmd.data, cmd.vocab};
      if (!pre_config.empty()) inputs.emplace_back(pre_config);
      write_manifest("pretrain", cmd.parameters(), {{"seed", cmd.hp.seed}}, inputs, {cmd.out, cmd.history},
                     manifest_path_for(cmd.out), started);
      std::cerr << "wrote " << cmd.out.string() << " (" << r.epoch_losses.size() << " epochs)\n";
    };
  });

  // finetune
  CLI::App* finetune_cmd = app.add_subcommand("finetune", "Fine-tune a cls or rupool classifier");
  std::string ft_data, ft_val, ft_labels, ft_vocab, ft_init, ft_config, ft_out, ft_history, ft_head = "rupool";
  bool ft_fresh = false;
  TrainFlags ft_flags;
  finetune_cmd->add_option("--data", ft_data, "Training visits (JSONL)")->required();
  finetune_cmd->add_option("--val", ft_val, "Validation visits (JSONL) for best-Hit@3 selection");
  finetune_cmd->add_option("--labels", ft_labels, "Label file")->required();
  finetune_cmd->add_option("--vocab", ft_vocab, "Vocabulary file")->required();
  CLI::Option* init_opt = finetune_cmd->add_option("--init", ft_init, "Start from this (pretrained) checkpoint");
  CLI::Option* fresh_opt = finetune_cmd->add_flag("--fresh", ft_fresh, "Start from random initialisation");
  init_opt->excludes(fresh_opt);
  finetune_cmd->add_option("--config", ft_config, "Model config for --fresh (toy defaults when omitted)");
  finetune_cmd->add_option("--head", ft_head, "cls or rupool")->check(CLI::IsMember({"cls", "rupool"}))
      ->capture_default_str();
  finetune_cmd->add_option("--out", ft_out, "Output checkpoint")->required();
  finetune_cmd->add_option("--history", ft_history, "Loss/metric history JSONL (default <out>.history.jsonl)");
  ft_flags.add(finetune_cmd, false);
  finetune_cmd->callback([&] {
    if (ft_init.empty() && !ft_fresh) throw CLI::ValidationError("finetune", "one of --init or --fresh is required");
    action = [&] {
      FinetuneCommand cmd{ft_data,
                          optional_path(ft_val),
                          ft_labels,
                          ft_vocab,
                          optional_path(ft_init),
                          config_or_toy(ft_config),
                          parse_head_kind(ft_head),
                          ft_flags.resolve(TrainHParams{}),
                          ft_out,
                          default_history(ft_out, ft_history)};
      const FinetuneResult r = cmd.run(print_history);
      std::vector<fs::path> inputs{cmd.data, cmd.labels, cmd.vocab};
      if (cmd.val) inputs.push_back(*cmd.val);
      if (cmd.init) inputs.push_back(*cmd.init);
      if (!ft_config.empty()) inputs.emplace_back(ft_config);
      write_manifest("finetune", cmd.parameters(), {{"seed", cmd.hp.seed}}, inputs, {cmd.out, cmd.history},
                     manifest_path_for(cmd.out), started);
      std::cerr << "wrote " << cmd.out.string() << " (best epoch " << r.best_epoch << ")\n";
    };
  });

  // evaluate
  CLI::App* evaluate = app.add_subcommand("evaluate", "F1, MRR and Hit@k of a classifier on labelled visits");
  std::string ev_model, ev_vocab, ev_labels, ev_data, ev_out, ev_by_length, ev_predictions;
  std::size_t ev_threshold = 20;
  evaluate->add_option("--model", ev_model, "Classifier checkpoint")->required();
  evaluate->add_option("--vocab", ev_vocab, "Vocabulary file")->required();
  evaluate->add_option("--labels", ev_labels, "Label file")->required();
  evaluate->add_option("--data", ev_data, "Visits to score (JSONL)")->required();
  evaluate->add_option("--out", ev_out, "Metrics report (JSON)")->required();
  evaluate->add_option("--by-length", ev_by_length, "Also write Hit@3 per input-length bin (CSV)");
  evaluate->add_option("--predictions", ev_predictions, "Also write top-3 codes per visit (JSONL)");
  evaluate->add_option("--length-threshold", ev_threshold, "Token count for the long-input share")
      ->capture_default_str();
  evaluate->callback([&] {
    action = [&] {
      EvaluateCommand cmd{ev_model, ev_vocab, ev_labels, ev_data, ev_out, optional_path(ev_by_length),
                          optional_path(ev_predictions), ev_threshold};
      const MetricsReport r = cmd.run();
      write_manifest("evaluate", cmd.parameters(), {}, {cmd.model, cmd.vocab, cmd.labels, cmd.data}, cmd.outputs(),
                     manifest_path_for(cmd.out), started);
      std::cout << "samples " << r.samples << "  hit@1 " << format_double(r.hit_at_1) << "  hit@3 "
                << format_double(r.hit_at_3) << "  mrr " << format_double(r.mrr) << "  f1_macro "
                << format_double(r.f1.macro) << "  f1_weighted " << format_double(r.f1.weighted) << "\n";
    };
  });

  // predict
  CLI::App* predict = app.add_subcommand("predict", "Top-n diagnosis codes for free text");
  std::string pr_model, pr_vocab, pr_labels, pr_text, pr_data, pr_out;
  std::size_t pr_top_n = 3, pr_min_tokens = 20;
  predict->add_option("--model", pr_model, "Classifier checkpoint")->required();
  predict->add_option("--vocab", pr_vocab, "Vocabulary file")->required();
  predict->add_option("--labels", pr_labels, "Label file")->required();
  CLI::Option* text_opt = predict->add_option("--text", pr_text, "Visit text to classify");
  CLI::Option* data_opt = predict->add_option("--data", pr_data, "Visits (JSONL); one output line per visit");
  text_opt->excludes(data_opt);
  predict->add_option("--top-n", pr_top_n, "Number of codes to return")->capture_default_str();
  predict->add_option("--min-tokens", pr_min_tokens, "Inputs shorter than this are flagged low-confidence")
      ->capture_default_str();
  predict->add_option("--out", pr_out, "Write JSON/JSONL here instead of stdout");
  predict->callback([&] {
    if (text_opt->count() == 0 && data_opt->count() == 0) {
      throw CLI::ValidationError("predict", "exactly one of --text or --data is required");
    }
    action = [&] {
      const Model model = load_checkpoint(pr_model);
      const Vocab vocab = Vocab::load(pr_vocab);
      const LabelSpace space = LabelSpace::load(pr_labels);
      std::string output;
      std::size_t flagged = 0;
      if (text_opt->count() > 0) {
        const std::vector<std::string> texts{pr_text};
        const Prediction p = predict_texts(model, vocab, space, texts, pr_top_n, pr_min_tokens).at(0);
        output = prediction_to_json(p).dump(2) + "\n";
        flagged += p.low_confidence;
      } else {
        const std::vector<VisitRecord> records = read_records(pr_data);
        std::vector<std::string> texts;
        for (const VisitRecord& r : records) texts.push_back(assemble_text(r));
        const std::vector<Prediction> ps = predict_texts(model, vocab, space, texts, pr_top_n, pr_min_tokens);
        for (std::size_t i = 0; i < ps.size(); ++i) {
          nlohmann::ordered_json j;
          j["visit_id"] = records[i].visit_id;
          for (auto& [k, v] : prediction_to_json(ps[i]).items()) j[k] = v;
          output += j.dump() + "\n";
          flagged += ps[i].low_confidence;
        }
      }
      if (flagged > 0) {
        std::cerr << "warning: " << flagged << " input(s) have fewer than " << pr_min_tokens
                  << " tokens; predictions are low-confidence\n";
      }
      if (pr_out.empty()) {
        std::cout << output;
      } else {
        write_text_file(pr_out, output);
        Parameters params{{"model", pr_model},   {"vocab", pr_vocab},
                          {"labels", pr_labels}, {"top_n", std::to_string(pr_top_n)},
                          {"min_tokens", std::to_string(pr_min_tokens)}, {"out", pr_out}};
        std::vector<fs::path> inputs{pr_model, pr_vocab, pr_labels};
        if (!pr_data.empty()) {
          params["data"] = pr_data;
          inputs.emplace_back(pr_data);
        } else {
          params["text_sha256"] = sha256_hex(pr_text);
        }
        write_manifest("predict", params, {}, inputs, {pr_out}, manifest_path_for(pr_out), started);
      }
    };
  });

  // panel analyze
  CLI::App* panel = app.add_subcommand("panel", "Expert-panel commands");
  panel->require_subcommand(1);
  CLI::App* analyze = panel->add_subcommand("analyze", "Fleiss' kappa, leave-one-out Hit@3 and Mann-Whitney U");
  std::string pa_panel, pa_model, pa_labels, pa_out;
  double pa_alpha = 0.05;
  analyze->add_option("--panel", pa_panel, "Expert answers (JSONL: visit_id, expert_id, answer)")->required();
  analyze->add_option("--model-answers", pa_model, "Model answers (JSONL: visit_id, codes), e.g. predict --data");
  analyze->add_option("--labels", pa_labels, "Restrict codes to this label file");
  analyze->add_option("--alpha", pa_alpha, "Significance level")->capture_default_str();
  analyze->add_option("--out", pa_out, "Report (JSON)")->required();
  analyze->callback([&] {
    action = [&] {
      std::optional<LabelSpace> space;
      if (!pa_labels.empty()) space = LabelSpace::load(pa_labels);
      const PanelDataset data = PanelDataset::load(pa_panel, space ? &*space : nullptr);
      const double kappa = fleiss_kappa(data);
      std::optional<std::map<std::string, Answer>> model_answers;
      if (!pa_model.empty()) model_answers = load_model_answers(pa_model);
      const LeaveOneOut loo = leave_one_out_scores(data, model_answers ? &*model_answers : nullptr);
      std::optional<MannWhitneyResult> test;
      if (model_answers) test = mann_whitney_u(loo.expert_scores, loo.model_scores, pa_alpha);
      write_text_file(pa_out, panel_report_json(data, loo, kappa, test).dump(2) + "\n");
      Parameters params{{"panel", pa_panel}, {"alpha", format_double(pa_alpha)}, {"out", pa_out}};
      std::vector<fs::path> inputs{pa_panel};
      if (!pa_model.empty()) {
        params["model_answers"] = pa_model;
        inputs.emplace_back(pa_model);
      }
      if (!pa_labels.empty()) {
        params["labels"] = pa_labels;
        inputs.emplace_back(pa_labels);
      }
      write_manifest("panel analyze", params, {}, inputs, {pa_out}, manifest_path_for(pa_out), started);
      std::cout << "kappa " << format_double(kappa) << "  experts hit@3 " << format_double(loo.expert_mean) << " +- "
                << format_double(loo.expert_std);
      if (test) {
        std::cout << "  model hit@3 " << format_double(loo.model_mean) << "  U " << format_double(test->u) << "  p "
                  << format_double(test->p_exact_two_sided) << (test->reject ? "  (reject)" : "  (no difference)");
      }
      std::cout << "\n";
    };
  });

  // report by-length
  CLI::App* report = app.add_subcommand("report", "Report commands");
  report->require_subcommand(1);
  CLI::App* by_length = report->add_subcommand("by-length", "Plot-ready table from evaluate --by-length output");
  std::string rb_input, rb_out, rb_svg;
  by_length->add_option("--input", rb_input, "CSV written by evaluate --by-length")->required();
  by_length->add_option("--out", rb_out, "Merged table (CSV: bin,count,hit_at_3)")->required();
  by_length->add_option("--svg", rb_svg, "Also render a bar chart (SVG)");
  by_length->callback([&] {
    action = [&] {
      const std::string table = merge_length_table(read_text_file(rb_input), rb_input);
      write_text_file(rb_out, table);
      std::vector<fs::path> outputs{rb_out};
      if (!rb_svg.empty()) {
        write_text_file(rb_svg, length_table_svg(table));
        outputs.emplace_back(rb_svg);
      }
      Parameters params{{"input", rb_input}, {"out", rb_out}};
      if (!rb_svg.empty()) params["svg"] = rb_svg;
      write_manifest("report by-length", params, {}, {rb_input}, outputs, manifest_path_for(rb_out), started);
    };
  });

  // pipeline run
  CLI::App* pipeline = app.add_subcommand("pipeline", "End-to-end workflow");
  pipeline->require_subcommand(1);
  CLI::App* pipeline_run = pipeline->add_subcommand("run", "synth -> tokenizer -> pretrain -> finetune -> evaluate");
  std::string pl_config, pl_out_dir;
  bool pl_force = false;
  pipeline_run->add_option("--config", pl_config, "Pipeline config (key=value)")->required();
  pipeline_run->add_option("--out-dir", pl_out_dir, "Overrides out_dir from the config");
  pipeline_run->add_flag("--force", pl_force, "Re-run every stage even when its outputs are up to date");
  pipeline_run->callback([&] {
    action = [&] {
      PipelineConfig config = PipelineConfig::load(pl_config);
      if (!pl_out_dir.empty()) {
        config.out_dir = std::filesystem::absolute(pl_out_dir);
        config.resolved["out_dir"] = config.out_dir.string();
      }
      const PipelineResult r = run_pipeline(config, pl_force, &std::cerr);
      std::cout << "metrics " << r.metrics.string() << "  hit@1 " << format_double(r.report.hit_at_1) << "  hit@3 "
                << format_double(r.report.hit_at_3) << "  mrr " << format_double(r.report.mrr) << "\n";
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }
  try {
    if (action) action();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 3;
  }
}
