// cl4d: contrastive dual-encoder training and retrieval evaluation over
// bimodal (query, code) corpora. Subcommands cover the full flow: extract ->
// filter -> dedup -> split -> build-vocab -> mine -> train -> eval.

#include <cstdlib>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "cl4d/config.hpp"
#include "cl4d/contrastive.hpp"
#include "cl4d/corpus.hpp"
#include "cl4d/eval.hpp"
#include "cl4d/gradcheck.hpp"
#include "cl4d/manifest.hpp"
#include "cl4d/miner.hpp"
#include "cl4d/model.hpp"
#include "cl4d/tokenizer.hpp"

namespace fs = std::filesystem;
using cl4d::config::Config;

namespace {

void apply_threads(int threads) {
  int n = threads;
  if (n <= 0) {
    if (const char* env = std::getenv("CL4D_THREADS")) n = std::atoi(env);
  }
  cl4d::set_thread_budget(n > 0 ? n : 1);
}

std::vector<std::string> pair_corpus_texts(
    const std::vector<cl4d::corpus::BimodalPair>& pairs) {
  std::vector<std::string> texts;
  texts.reserve(pairs.size() * 2);
  for (const auto& p : pairs) {
    texts.push_back(p.query);
    texts.push_back(p.code);
  }
  return texts;
}

cl4d::train::HardNegativeMap load_hard_map(const fs::path& path) {
  return cl4d::miner::to_hard_negative_map(
      cl4d::miner::mined_from_jsonl(cl4d::read_file(path)));
}

struct LoadedModel {
  cl4d::model::Checkpoint ckpt;
  cl4d::bpe::Vocab vocab;
};

LoadedModel load_model_and_vocab(const std::string& model_path,
                                 const fs::path& vocab_path) {
  LoadedModel lm{cl4d::model::load_checkpoint(model_path),
                 cl4d::bpe::Vocab::load(vocab_path)};
  if (lm.vocab.size() != lm.ckpt.config.vocab_size)
    throw cl4d::DataError(
        "vocab size " + std::to_string(lm.vocab.size()) +
        " does not match the checkpoint's vocab_size " +
        std::to_string(lm.ckpt.config.vocab_size) +
        "; pass the vocab the model was trained with");
  return lm;
}

int cmd_extract(const std::string& lang, const fs::path& in_dir,
                const fs::path& out, const std::string& repo) {
  cl4d::ManifestTimer timer;
  auto language = cl4d::corpus::language_from_name(lang);
  auto result = cl4d::corpus::extract_directory(in_dir, language, repo);
  for (const auto& err : result.parse_errors)
    std::cerr << "warning: parse failure: " << err << "\n";
  auto pairs = cl4d::corpus::make_pairs(result.functions);
  cl4d::corpus::save_pairs(out, pairs);
  std::cout << "extracted " << result.functions.size() << " functions, "
            << pairs.size() << " bimodal pairs ("
            << result.parse_errors.size() << " files skipped)\n";

  cl4d::RunManifest manifest;
  manifest.command = "extract";
  manifest.config["lang"] = lang;
  manifest.config["in"] = in_dir.string();
  manifest.wall_time_ms = timer.elapsed_ms();
  manifest.write_beside(out);
  return 0;
}

int cmd_filter(const fs::path& in, const fs::path& out, const fs::path& report,
               const Config& cfg) {
  cl4d::ManifestTimer timer;
  auto pairs = cl4d::corpus::load_pairs(in);
  auto [kept, rep] = cl4d::corpus::filter_pairs(pairs, cfg.filter_config());
  cl4d::corpus::save_pairs(out, kept);
  cl4d::write_file(report, rep.to_json().dump(2) + "\n");
  std::cout << rep.to_json().dump(2) << "\n";

  cl4d::RunManifest manifest;
  manifest.command = "filter";
  manifest.config = cfg.to_json();
  manifest.input_hashes[in.string()] = cl4d::file_sha256(in);
  manifest.wall_time_ms = timer.elapsed_ms();
  manifest.write_beside(out);
  return 0;
}

int cmd_dedup(const fs::path& in, const fs::path& out) {
  cl4d::ManifestTimer timer;
  auto pairs = cl4d::corpus::load_pairs(in);
  auto kept = cl4d::corpus::dedup(pairs);
  cl4d::corpus::save_pairs(out, kept);
  std::cout << "dedup: " << pairs.size() << " -> " << kept.size() << "\n";

  cl4d::RunManifest manifest;
  manifest.command = "dedup";
  manifest.input_hashes[in.string()] = cl4d::file_sha256(in);
  manifest.wall_time_ms = timer.elapsed_ms();
  manifest.write_beside(out);
  return 0;
}

int cmd_split(const fs::path& in, const fs::path& out_dir,
              const std::vector<double>& ratios, std::uint64_t seed) {
  cl4d::ManifestTimer timer;
  if (ratios.size() != 3)
    throw cl4d::RatioError("expected three ratios train,valid,test");
  auto pairs = cl4d::corpus::load_pairs(in);
  auto splits = cl4d::corpus::split(pairs, ratios[0], ratios[1], ratios[2], seed);
  fs::create_directories(out_dir);
  cl4d::corpus::save_pairs(out_dir / "train.jsonl", splits.train);
  cl4d::corpus::save_pairs(out_dir / "valid.jsonl", splits.valid);
  cl4d::corpus::save_pairs(out_dir / "test.jsonl", splits.test);
  std::cout << "split: " << splits.train.size() << "/" << splits.valid.size()
            << "/" << splits.test.size() << "\n";

  cl4d::RunManifest manifest;
  manifest.command = "split";
  manifest.seed = seed;
  manifest.config["ratios"] = ratios;
  manifest.input_hashes[in.string()] = cl4d::file_sha256(in);
  manifest.wall_time_ms = timer.elapsed_ms();
  manifest.write_beside(out_dir / "train.jsonl");
  return 0;
}

int cmd_build_vocab(const fs::path& in, const fs::path& out, int size,
                    std::uint64_t seed) {
  cl4d::ManifestTimer timer;
  auto pairs = cl4d::corpus::load_pairs(in);
  auto vocab = cl4d::bpe::build_vocab(pair_corpus_texts(pairs), size, seed);
  vocab.save(out);
  std::cout << "vocab size " << vocab.size() << " (" << vocab.merges().size()
            << " merges)\n";

  cl4d::RunManifest manifest;
  manifest.command = "build-vocab";
  manifest.seed = seed;
  manifest.config["size"] = size;
  manifest.input_hashes[in.string()] = cl4d::file_sha256(in);
  manifest.wall_time_ms = timer.elapsed_ms();
  manifest.write_beside(out);
  return 0;
}

int cmd_mine(const fs::path& data, const std::string& model_arg,
             const fs::path& out, const std::optional<fs::path>& vocab_path,
             double near_dup_threshold) {
  cl4d::ManifestTimer timer;
  auto pairs = cl4d::corpus::load_pairs(data);
  std::unique_ptr<cl4d::miner::MinerModel> model;
  if (model_arg == "tfidf") {
    std::vector<std::string> codes;
    for (const auto& p : pairs) codes.push_back(p.code);
    model = std::make_unique<cl4d::miner::TfidfMiner>(codes);
  } else {
    if (!vocab_path)
      throw cl4d::ConfigError("--vocab is required with a checkpoint miner");
    auto [ckpt, vocab] = load_model_and_vocab(model_arg, *vocab_path);
    model = std::make_unique<cl4d::miner::CheckpointMiner>(
        std::move(ckpt.params), ckpt.config, std::move(vocab));
  }
  auto result = cl4d::miner::mine_all(pairs, *model, near_dup_threshold);
  cl4d::write_file(out, cl4d::miner::mined_to_jsonl(result.entries));
  for (const auto& id : result.skipped)
    std::cerr << "warning: no hard negative for pair " << id << "\n";
  std::cout << "mined " << result.entries.size() << " hard negatives ("
            << result.skipped.size() << " skipped)\n";

  cl4d::RunManifest manifest;
  manifest.command = "mine";
  manifest.config["model"] = model_arg;
  manifest.config["near_dup_threshold"] = near_dup_threshold;
  manifest.input_hashes[data.string()] = cl4d::file_sha256(data);
  manifest.wall_time_ms = timer.elapsed_ms();
  manifest.write_beside(out);
  return 0;
}

int cmd_train(const fs::path& data, const fs::path& vocab_path,
              const fs::path& out_dir,
              const std::optional<fs::path>& hard_path, const Config& cfg) {
  cl4d::ManifestTimer timer;
  auto pairs = cl4d::corpus::load_pairs(data);
  auto vocab = cl4d::bpe::Vocab::load(vocab_path);
  auto mcfg = cfg.model_config(vocab.size());
  auto tcfg = cfg.train_config();
  std::optional<cl4d::train::HardNegativeMap> hard;
  if (hard_path) hard = load_hard_map(*hard_path);
  if (tcfg.use_hard_negatives && !hard)
    std::cerr << "note: use_hard_negatives is on but no --hard-negatives file "
                 "was given; training with in-batch negatives only\n";

  fs::create_directories(out_dir);
  auto result = cl4d::train::train(pairs, vocab, mcfg, tcfg, hard, out_dir);
  cl4d::write_file(out_dir / "loss.csv",
                   cl4d::train::loss_curve_csv(result.curve));
  std::cout << "trained " << result.curve.size() << " steps; final loss "
            << (result.curve.empty() ? 0.0 : result.curve.back().total)
            << "; checkpoints in " << out_dir.string() << "\n";

  cl4d::RunManifest manifest;
  manifest.command = "train";
  manifest.seed = tcfg.seed;
  manifest.config = cfg.to_json();
  manifest.input_hashes[data.string()] = cl4d::file_sha256(data);
  manifest.input_hashes[vocab_path.string()] = cl4d::file_sha256(vocab_path);
  if (hard_path)
    manifest.input_hashes[hard_path->string()] = cl4d::file_sha256(*hard_path);
  manifest.wall_time_ms = timer.elapsed_ms();
  manifest.write_beside(out_dir / "ckpt_final.bin");
  return 0;
}

struct EvalOverrides {
  std::string pooling, pad_side, pad_policy;
  void apply(cl4d::model::ModelConfig& cfg) const {
    if (!pooling.empty()) cfg.pooling = cl4d::model::pooling_from_name(pooling);
    if (!pad_side.empty()) cfg.pad_side = cl4d::bpe::pad_side_from_name(pad_side);
    if (!pad_policy.empty())
      cfg.pad_policy = cl4d::model::pad_policy_from_name(pad_policy);
  }
};

int cmd_eval_search(const std::string& model_path, const fs::path& vocab_path,
                    const std::optional<fs::path>& data,
                    const std::optional<fs::path>& queries,
                    const std::optional<fs::path>& pool, const fs::path& out,
                    const EvalOverrides& overrides, std::size_t pool_size,
                    std::uint64_t pool_seed) {
  cl4d::ManifestTimer timer;
  auto [ckpt, vocab] = load_model_and_vocab(model_path, vocab_path);
  overrides.apply(ckpt.config);

  cl4d::eval::SearchEvalSet set;
  if (data) {
    set = cl4d::eval::SearchEvalSet::from_pairs(cl4d::corpus::load_pairs(*data));
  } else if (queries && pool) {
    set = cl4d::eval::load_search_set(*queries, *pool);
  } else {
    throw cl4d::ConfigError("eval-search needs --data or --queries with --pool");
  }
  auto metrics = cl4d::eval::mrr(set, ckpt.params, vocab, ckpt.config,
                                 pool_size, pool_seed);
  cl4d::write_file(out, metrics.to_json().dump(2) + "\n");
  std::cout << metrics.to_table() << metrics.to_json().dump(2) << "\n";

  cl4d::RunManifest manifest;
  manifest.command = "eval-search";
  manifest.config["model"] = model_path;
  manifest.input_hashes[model_path] = cl4d::file_sha256(model_path);
  manifest.wall_time_ms = timer.elapsed_ms();
  manifest.write_beside(out);
  return 0;
}

int cmd_eval_clone(const std::string& model_path, const fs::path& vocab_path,
                   const fs::path& data, const fs::path& out,
                   const EvalOverrides& overrides) {
  cl4d::ManifestTimer timer;
  auto [ckpt, vocab] = load_model_and_vocab(model_path, vocab_path);
  overrides.apply(ckpt.config);
  auto set = cl4d::eval::load_clone_set(data);
  auto metrics = cl4d::eval::map_clone(set, ckpt.params, vocab, ckpt.config);
  cl4d::write_file(out, metrics.to_json().dump(2) + "\n");
  std::cout << metrics.to_table() << metrics.to_json().dump(2) << "\n";

  cl4d::RunManifest manifest;
  manifest.command = "eval-clone";
  manifest.config["model"] = model_path;
  manifest.input_hashes[model_path] = cl4d::file_sha256(model_path);
  manifest.input_hashes[data.string()] = cl4d::file_sha256(data);
  manifest.wall_time_ms = timer.elapsed_ms();
  manifest.write_beside(out);
  return 0;
}

int cmd_ablate(const std::string& model_path, const fs::path& vocab_path,
               const fs::path& data, const std::string& policy,
               const fs::path& out) {
  cl4d::ManifestTimer timer;
  auto [ckpt, vocab] = load_model_and_vocab(model_path, vocab_path);
  auto set = cl4d::eval::SearchEvalSet::from_pairs(cl4d::corpus::load_pairs(data));
  auto grid = cl4d::eval::ablation_grid(ckpt.params, ckpt.config, set, vocab,
                                        cl4d::model::pad_policy_from_name(policy));
  cl4d::write_file(out, cl4d::eval::grid_to_json(grid).dump(2) + "\n");
  std::cout << cl4d::eval::grid_to_table(grid);

  cl4d::RunManifest manifest;
  manifest.command = "ablate";
  manifest.config["model"] = model_path;
  manifest.config["policy"] = policy;
  manifest.input_hashes[model_path] = cl4d::file_sha256(model_path);
  manifest.input_hashes[data.string()] = cl4d::file_sha256(data);
  manifest.wall_time_ms = timer.elapsed_ms();
  manifest.write_beside(out);
  return 0;
}

int cmd_embed(const std::string& model_path, const fs::path& vocab_path,
              const fs::path& data, const std::string& field,
              const fs::path& out) {
  cl4d::ManifestTimer timer;
  auto [ckpt, vocab] = load_model_and_vocab(model_path, vocab_path);
  auto pairs = cl4d::corpus::load_pairs(data);
  std::vector<std::string> texts;
  for (const auto& p : pairs)
    texts.push_back(field == "query" ? p.query : p.code);
  auto embs = cl4d::model::embed(ckpt.params, texts, vocab, ckpt.config);
  std::string tsv;
  char buf[32];
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    tsv += pairs[i].id;
    for (float v : embs[i]) {
      std::snprintf(buf, sizeof(buf), "\t%.7g", double(v));
      tsv += buf;
    }
    tsv += "\n";
  }
  cl4d::write_file(out, tsv);
  std::cout << "embedded " << pairs.size() << " " << field << " texts\n";

  cl4d::RunManifest manifest;
  manifest.command = "embed";
  manifest.config["model"] = model_path;
  manifest.config["field"] = field;
  manifest.input_hashes[data.string()] = cl4d::file_sha256(data);
  manifest.wall_time_ms = timer.elapsed_ms();
  manifest.write_beside(out);
  return 0;
}

int cmd_project(const std::string& model_path, const fs::path& vocab_path,
                const fs::path& data, const std::string& field,
                const std::string& label_key, const fs::path& out,
                const std::optional<fs::path>& svg) {
  cl4d::ManifestTimer timer;
  auto [ckpt, vocab] = load_model_and_vocab(model_path, vocab_path);
  auto pairs = cl4d::corpus::load_pairs(data);
  std::vector<std::string> texts, labels;
  for (const auto& p : pairs) {
    texts.push_back(field == "query" ? p.query : p.code);
    labels.push_back(label_key == "id"
                         ? p.id
                         : cl4d::corpus::language_name(p.language));
  }
  auto embs = cl4d::model::embed(ckpt.params, texts, vocab, ckpt.config);
  auto points = cl4d::eval::project_2d(embs, labels);
  cl4d::write_file(out, cl4d::eval::projection_to_tsv(points));
  if (svg) cl4d::write_file(*svg, cl4d::eval::projection_to_svg(points));
  std::cout << "projected " << points.size() << " points\n";

  cl4d::RunManifest manifest;
  manifest.command = "project";
  manifest.config["model"] = model_path;
  manifest.config["field"] = field;
  manifest.input_hashes[data.string()] = cl4d::file_sha256(data);
  manifest.wall_time_ms = timer.elapsed_ms();
  manifest.write_beside(out);
  return 0;
}

int cmd_gradcheck(const std::optional<fs::path>& out) {
  cl4d::ManifestTimer timer;
  auto results = cl4d::gradcheck::run_op_checks();
  results.push_back(cl4d::gradcheck::run_full_model_check());
  auto json = cl4d::gradcheck::results_to_json(results);
  std::cout << json.dump(2) << "\n";
  if (out) {
    cl4d::write_file(*out, json.dump(2) + "\n");
    cl4d::RunManifest manifest;
    manifest.command = "gradcheck";
    manifest.wall_time_ms = timer.elapsed_ms();
    manifest.write_beside(*out);
  }
  return json["pass"].get<bool>() ? 0 : 1;
}

int cmd_pipeline(const fs::path& config_path, const Config& cfg) {
  cl4d::ManifestTimer timer;
  fs::path out_dir = cfg.get_string("out_dir", "cl4d_out");
  fs::create_directories(out_dir);

  std::vector<cl4d::corpus::BimodalPair> pairs;
  if (cfg.has("pairs")) {
    pairs = cl4d::corpus::load_pairs(cfg.get_string("pairs", ""));
  } else if (cfg.has("input_dir")) {
    auto language =
        cl4d::corpus::language_from_name(cfg.get_string("language", "python"));
    auto extraction =
        cl4d::corpus::extract_directory(cfg.get_string("input_dir", ""), language);
    for (const auto& err : extraction.parse_errors)
      std::cerr << "warning: parse failure: " << err << "\n";
    pairs = cl4d::corpus::make_pairs(extraction.functions);
    cl4d::corpus::save_pairs(out_dir / "pairs.jsonl", pairs);
  } else {
    throw cl4d::ConfigError("pipeline config needs 'pairs' or 'input_dir'");
  }
  std::cout << "pipeline: " << pairs.size() << " pairs in\n";

  auto [kept, report] = cl4d::corpus::filter_pairs(pairs, cfg.filter_config());
  cl4d::corpus::save_pairs(out_dir / "filtered.jsonl", kept);
  cl4d::write_file(out_dir / "filter_report.json",
                   report.to_json().dump(2) + "\n");

  auto unique_pairs = cl4d::corpus::dedup(kept);
  cl4d::corpus::save_pairs(out_dir / "dedup.jsonl", unique_pairs);
  std::cout << "pipeline: " << unique_pairs.size() << " pairs after filters\n";

  auto ratios = cfg.get_ratios("ratios", {0.8, 0.1, 0.1});
  if (ratios.size() != 3)
    throw cl4d::RatioError("ratios must have three components");
  std::uint64_t seed = static_cast<std::uint64_t>(cfg.get_int("seed", 0));
  auto splits =
      cl4d::corpus::split(unique_pairs, ratios[0], ratios[1], ratios[2], seed);
  cl4d::corpus::save_pairs(out_dir / "train.jsonl", splits.train);
  cl4d::corpus::save_pairs(out_dir / "valid.jsonl", splits.valid);
  cl4d::corpus::save_pairs(out_dir / "test.jsonl", splits.test);

  int vocab_target = static_cast<int>(cfg.get_int("vocab_size", 4096));
  auto vocab =
      cl4d::bpe::build_vocab(pair_corpus_texts(splits.train), vocab_target, seed);
  vocab.save(out_dir / "vocab.json");
  std::cout << "pipeline: vocab " << vocab.size() << "\n";

  auto tcfg = cfg.train_config();
  std::optional<cl4d::train::HardNegativeMap> hard;
  if (tcfg.use_hard_negatives) {
    std::string miner_arg = cfg.get_string("miner", "tfidf");
    std::unique_ptr<cl4d::miner::MinerModel> miner_model;
    if (miner_arg == "tfidf") {
      std::vector<std::string> codes;
      for (const auto& p : splits.train) codes.push_back(p.code);
      miner_model = std::make_unique<cl4d::miner::TfidfMiner>(codes);
    } else {
      auto ckpt = cl4d::model::load_checkpoint(miner_arg);
      miner_model = std::make_unique<cl4d::miner::CheckpointMiner>(
          std::move(ckpt.params), ckpt.config, vocab);
    }
    auto mined = cl4d::miner::mine_all(splits.train, *miner_model,
                                       cfg.get_double("near_dup_threshold", 0.98));
    cl4d::write_file(out_dir / "hn.jsonl",
                     cl4d::miner::mined_to_jsonl(mined.entries));
    hard = cl4d::miner::to_hard_negative_map(mined.entries);
    std::cout << "pipeline: " << mined.entries.size() << " hard negatives\n";
  }

  auto mcfg = cfg.model_config(vocab.size());
  fs::path ckpt_dir = out_dir / "ckpt";
  fs::create_directories(ckpt_dir);
  auto result = cl4d::train::train(splits.train, vocab, mcfg, tcfg, hard, ckpt_dir);
  cl4d::write_file(out_dir / "loss.csv",
                   cl4d::train::loss_curve_csv(result.curve));
  std::cout << "pipeline: trained " << result.curve.size() << " steps\n";

  auto eval_set = cl4d::eval::SearchEvalSet::from_pairs(splits.test);
  auto metrics = cl4d::eval::mrr(eval_set, result.params, vocab, mcfg);
  cl4d::write_file(out_dir / "metrics.json", metrics.to_json().dump(2) + "\n");
  std::cout << metrics.to_json().dump(2) << "\n";

  cl4d::RunManifest manifest;
  manifest.command = "pipeline";
  manifest.seed = seed;
  manifest.config = cfg.to_json();
  manifest.input_hashes[config_path.string()] = cl4d::file_sha256(config_path);
  manifest.wall_time_ms = timer.elapsed_ms();
  manifest.write_beside(out_dir / "metrics.json");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cl4d: contrastive continued pre-training of a decoder-only "
               "dual encoder for code search and clone detection"};
  app.require_subcommand(1);

  int threads = 0;
  app.add_option("--threads", threads, "worker thread cap (env CL4D_THREADS)");

  auto* extract = app.add_subcommand("extract", "extract bimodal pairs");
  std::string ex_lang = "python", ex_repo;
  fs::path ex_in, ex_out;
  extract->add_option("--lang", ex_lang, "language")->required();
  extract->add_option("--in", ex_in, "source directory")->required();
  extract->add_option("--out", ex_out, "output JSONL")->required();
  extract->add_option("--repo", ex_repo, "repo name for metadata");

  auto* filter = app.add_subcommand("filter", "apply corpus quality rules");
  fs::path fi_in, fi_out, fi_report;
  std::string fi_config;
  filter->add_option("--in", fi_in)->required();
  filter->add_option("--out", fi_out)->required();
  filter->add_option("--report", fi_report, "filter report JSON path");
  filter->add_option("--config", fi_config, "key-value config file");

  auto* dedup_cmd = app.add_subcommand("dedup", "drop near-duplicate codes");
  fs::path de_in, de_out;
  dedup_cmd->add_option("--in", de_in)->required();
  dedup_cmd->add_option("--out", de_out)->required();

  auto* split_cmd = app.add_subcommand("split", "seeded train/valid/test split");
  fs::path sp_in, sp_out;
  std::string sp_ratios = "0.8,0.1,0.1";
  std::uint64_t sp_seed = 0;
  split_cmd->add_option("--in", sp_in)->required();
  split_cmd->add_option("--out-dir", sp_out)->required();
  split_cmd->add_option("--ratios", sp_ratios, "train,valid,test");
  split_cmd->add_option("--seed", sp_seed);

  auto* bv = app.add_subcommand("build-vocab", "train the byte-level BPE vocab");
  fs::path bv_in, bv_out;
  int bv_size = 4096;
  std::uint64_t bv_seed = 0;
  bv->add_option("--in", bv_in)->required();
  bv->add_option("--out", bv_out)->required();
  bv->add_option("--size", bv_size);
  bv->add_option("--seed", bv_seed);

  auto* mine_cmd = app.add_subcommand("mine", "mine hard negatives");
  fs::path mi_data, mi_out;
  std::string mi_model = "tfidf";
  std::string mi_vocab;
  double mi_near_dup = 0.98;
  mine_cmd->add_option("--data", mi_data)->required();
  mine_cmd->add_option("--model", mi_model, "tfidf or a checkpoint path");
  mine_cmd->add_option("--vocab", mi_vocab, "vocab.json (checkpoint miner)");
  mine_cmd->add_option("--out", mi_out)->required();
  mine_cmd->add_option("--near-dup", mi_near_dup,
                       "similarity cutoff, <=0 disables");

  auto* train_cmd = app.add_subcommand("train", "contrastive training");
  fs::path tr_data, tr_vocab, tr_out;
  std::string tr_config, tr_hard;
  double tr_lr = 0, tr_temp = 0;
  int tr_epochs = 0, tr_batch = 0;
  std::uint64_t tr_seed = 0;
  bool tr_no_in_batch = false, tr_no_hard = false;
  train_cmd->add_option("--data", tr_data)->required();
  train_cmd->add_option("--vocab", tr_vocab)->required();
  train_cmd->add_option("--out", tr_out)->required();
  train_cmd->add_option("--config", tr_config, "key-value config file");
  train_cmd->add_option("--hard-negatives", tr_hard, "hn.jsonl from mine");
  auto* tr_lr_opt = train_cmd->add_option("--lr", tr_lr);
  auto* tr_temp_opt = train_cmd->add_option("--temperature", tr_temp);
  auto* tr_epochs_opt = train_cmd->add_option("--epochs", tr_epochs);
  auto* tr_batch_opt = train_cmd->add_option("--batch-size", tr_batch);
  auto* tr_seed_opt = train_cmd->add_option("--seed", tr_seed);
  train_cmd->add_flag("--no-in-batch", tr_no_in_batch,
                      "ablation: positive-only denominator");
  train_cmd->add_flag("--no-hard-negatives", tr_no_hard,
                      "ablation: in-batch negatives only");

  auto* es = app.add_subcommand("eval-search", "MRR over a code search pool");
  std::string es_model;
  fs::path es_vocab, es_out;
  std::string es_data, es_queries, es_pool;
  EvalOverrides es_over;
  es->add_option("--model", es_model)->required();
  es->add_option("--vocab", es_vocab)->required();
  es->add_option("--data", es_data, "pairs JSONL (queries + pool)");
  es->add_option("--queries", es_queries, "queries JSONL");
  es->add_option("--pool", es_pool, "pool JSONL");
  es->add_option("--out", es_out)->required();
  es->add_option("--pooling", es_over.pooling, "last|mean")
      ->check(CLI::IsMember({"last", "mean"}));
  es->add_option("--pad-side", es_over.pad_side, "left|right")
      ->check(CLI::IsMember({"left", "right"}));
  es->add_option("--pad-policy", es_over.pad_policy, "masked|naive")
      ->check(CLI::IsMember({"masked", "naive"}));
  std::size_t es_pool_size = 0;
  std::uint64_t es_pool_seed = 0;
  es->add_option("--pool-size", es_pool_size,
                 "candidates per query (0 = full pool)");
  es->add_option("--pool-seed", es_pool_seed, "distractor sampling seed");

  auto* ec = app.add_subcommand("eval-clone", "MAP for clone detection");
  std::string ec_model;
  fs::path ec_vocab, ec_data, ec_out;
  EvalOverrides ec_over;
  ec->add_option("--model", ec_model)->required();
  ec->add_option("--vocab", ec_vocab)->required();
  ec->add_option("--data", ec_data, "clone items JSONL")->required();
  ec->add_option("--out", ec_out)->required();
  ec->add_option("--pooling", ec_over.pooling, "last|mean")
      ->check(CLI::IsMember({"last", "mean"}));
  ec->add_option("--pad-side", ec_over.pad_side, "left|right")
      ->check(CLI::IsMember({"left", "right"}));
  ec->add_option("--pad-policy", ec_over.pad_policy, "masked|naive")
      ->check(CLI::IsMember({"masked", "naive"}));

  auto* ab = app.add_subcommand("ablate", "pooling x padding grid");
  std::string ab_model, ab_policy = "naive";
  fs::path ab_vocab, ab_data, ab_out;
  ab->add_option("--model", ab_model)->required();
  ab->add_option("--vocab", ab_vocab)->required();
  ab->add_option("--data", ab_data)->required();
  ab->add_option("--policy", ab_policy, "masked|naive")
      ->check(CLI::IsMember({"masked", "naive"}));
  ab->add_option("--out", ab_out)->required();

  auto* em = app.add_subcommand("embed", "emit embeddings as TSV");
  std::string em_model, em_field = "code";
  fs::path em_vocab, em_data, em_out;
  em->add_option("--model", em_model)->required();
  em->add_option("--vocab", em_vocab)->required();
  em->add_option("--data", em_data)->required();
  em->add_option("--field", em_field, "query|code")
      ->check(CLI::IsMember({"query", "code"}));
  em->add_option("--out", em_out)->required();

  auto* pj = app.add_subcommand("project", "2-D projection for cluster plots");
  std::string pj_model, pj_field = "code", pj_label = "language", pj_svg;
  fs::path pj_vocab, pj_data, pj_out;
  pj->add_option("--model", pj_model)->required();
  pj->add_option("--vocab", pj_vocab)->required();
  pj->add_option("--data", pj_data)->required();
  pj->add_option("--field", pj_field, "query|code")
      ->check(CLI::IsMember({"query", "code"}));
  pj->add_option("--label", pj_label, "language|id")
      ->check(CLI::IsMember({"language", "id"}));
  pj->add_option("--out", pj_out)->required();
  pj->add_option("--svg", pj_svg, "optional SVG scatter path");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  std::string gc_out;
  gc->add_option("--out", gc_out, "write results JSON here too");

  auto* pl = app.add_subcommand("pipeline", "full corpus -> metrics flow");
  std::string pl_config;
  std::string pl_out_dir;
  std::uint64_t pl_seed = 0;
  pl->add_option("--config", pl_config)->required();
  auto* pl_out_opt = pl->add_option("--out-dir", pl_out_dir);
  auto* pl_seed_opt = pl->add_option("--seed", pl_seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  apply_threads(threads);

  try {
    if (*extract) return cmd_extract(ex_lang, ex_in, ex_out, ex_repo);
    if (*filter) {
      Config cfg;
      if (!fi_config.empty()) cfg = Config::load(fi_config);
      fs::path report = fi_report.empty()
                            ? fs::path(fi_out.string() + ".report.json")
                            : fi_report;
      return cmd_filter(fi_in, fi_out, report, cfg);
    }
    if (*dedup_cmd) return cmd_dedup(de_in, de_out);
    if (*split_cmd) {
      Config ratio_cfg;
      ratio_cfg.set("ratios", sp_ratios);
      return cmd_split(sp_in, sp_out, ratio_cfg.get_ratios("ratios", {}),
                       sp_seed);
    }
    if (*bv) return cmd_build_vocab(bv_in, bv_out, bv_size, bv_seed);
    if (*mine_cmd)
      return cmd_mine(mi_data, mi_model, mi_out,
                      mi_vocab.empty() ? std::nullopt
                                       : std::optional<fs::path>(mi_vocab),
                      mi_near_dup);
    if (*train_cmd) {
      Config cfg;
      if (!tr_config.empty()) cfg = Config::load(tr_config);
      if (tr_lr_opt->count()) cfg.set("lr", std::to_string(tr_lr));
      if (tr_temp_opt->count()) cfg.set("temperature", std::to_string(tr_temp));
      if (tr_epochs_opt->count()) cfg.set("epochs", std::to_string(tr_epochs));
      if (tr_batch_opt->count())
        cfg.set("batch_size", std::to_string(tr_batch));
      if (tr_seed_opt->count()) cfg.set("seed", std::to_string(tr_seed));
      if (tr_no_in_batch) cfg.set("use_in_batch", "false");
      if (tr_no_hard) cfg.set("use_hard_negatives", "false");
      return cmd_train(tr_data, tr_vocab, tr_out,
                       tr_hard.empty() ? std::nullopt
                                       : std::optional<fs::path>(tr_hard),
                       cfg);
    }
    if (*es)
      return cmd_eval_search(
          es_model, es_vocab,
          es_data.empty() ? std::nullopt : std::optional<fs::path>(es_data),
          es_queries.empty() ? std::nullopt
                             : std::optional<fs::path>(es_queries),
          es_pool.empty() ? std::nullopt : std::optional<fs::path>(es_pool),
          es_out, es_over, es_pool_size, es_pool_seed);
    if (*ec) return cmd_eval_clone(ec_model, ec_vocab, ec_data, ec_out, ec_over);
    if (*ab) return cmd_ablate(ab_model, ab_vocab, ab_data, ab_policy, ab_out);
    if (*em) return cmd_embed(em_model, em_vocab, em_data, em_field, em_out);
    if (*pj)
      return cmd_project(pj_model, pj_vocab, pj_data, pj_field, pj_label,
                         pj_out,
                         pj_svg.empty() ? std::nullopt
                                        : std::optional<fs::path>(pj_svg));
    if (*gc)
      return cmd_gradcheck(gc_out.empty() ? std::nullopt
                                          : std::optional<fs::path>(gc_out));
    if (*pl) {
      Config cfg = Config::load(pl_config);
      if (pl_out_opt->count()) cfg.set("out_dir", pl_out_dir);
      if (pl_seed_opt->count()) cfg.set("seed", std::to_string(pl_seed));
      return cmd_pipeline(pl_config, cfg);
    }
  } catch (const cl4d::Error& e) {
    std::cerr << "error [" << e.kind() << "]: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
