#include "ddnmt/json_io.hpp"

namespace ddnmt {

using nlohmann::json;

void to_json(json& j, const ModelConfig& c) {
  j = json{{"num_layers", c.num_layers},
           {"model_dim", c.model_dim},
           {"ffn_dim", c.ffn_dim},
           {"num_heads", c.num_heads},
           {"dropout", c.dropout},
           {"share_target_embeddings_with_output", c.share_target_embeddings_with_output},
           {"max_positions", c.max_positions},
           {"source_vocab_size", c.source_vocab_size},
           {"target_vocab_size", c.target_vocab_size}};
}

void from_json(const json& j, ModelConfig& c) {
  c = ModelConfig{};
  c.num_layers = j.value("num_layers", c.num_layers);
  c.model_dim = j.value("model_dim", c.model_dim);
  c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
  c.num_heads = j.value("num_heads", c.num_heads);
  c.dropout = j.value("dropout", c.dropout);
  c.share_target_embeddings_with_output =
      j.value("share_target_embeddings_with_output", c.share_target_embeddings_with_output);
  c.max_positions = j.value("max_positions", c.max_positions);
  c.source_vocab_size = j.value("source_vocab_size", c.source_vocab_size);
  c.target_vocab_size = j.value("target_vocab_size", c.target_vocab_size);
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"peak_lr", c.peak_lr},
           {"warmup_steps", c.warmup_steps},
           {"label_smoothing", c.label_smoothing},
           {"max_updates", c.max_updates},
           {"batch_tokens", c.batch_tokens},
           {"seed", c.seed},
           {"checkpoint_interval", c.checkpoint_interval},
           {"keep_last_checkpoints", c.keep_last_checkpoints},
           {"average_kept_checkpoints", c.average_kept_checkpoints}};
}

void from_json(const json& j, TrainConfig& c) {
  c = TrainConfig{};
  c.peak_lr = j.value("peak_lr", c.peak_lr);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.label_smoothing = j.value("label_smoothing", c.label_smoothing);
  c.max_updates = j.value("max_updates", c.max_updates);
  c.batch_tokens = j.value("batch_tokens", c.batch_tokens);
  c.seed = j.value("seed", c.seed);
  c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
  c.keep_last_checkpoints = j.value("keep_last_checkpoints", c.keep_last_checkpoints);
  c.average_kept_checkpoints = j.value("average_kept_checkpoints", c.average_kept_checkpoints);
}

void to_json(json& j, const DecodeConfig& c) {
  j = json{{"beam_size", c.beam_size},
           {"length_penalty", c.length_penalty},
           {"max_len_factor", c.max_len_factor}};
}

void from_json(const json& j, DecodeConfig& c) {
  c = DecodeConfig{};
  c.beam_size = j.value("beam_size", c.beam_size);
  c.length_penalty = j.value("length_penalty", c.length_penalty);
  c.max_len_factor = j.value("max_len_factor", c.max_len_factor);
}

void to_json(json& j, const ToyTaskSpec& c) {
  j = json{{"vocab_size", c.vocab_size}, {"min_len", c.min_len},
           {"max_len", c.max_len},       {"train_size", c.train_size},
           {"valid_size", c.valid_size}, {"test_size", c.test_size},
           {"rule_seed", c.rule_seed}};
}

void from_json(const json& j, ToyTaskSpec& c) {
  c = ToyTaskSpec{};
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.min_len = j.value("min_len", c.min_len);
  c.max_len = j.value("max_len", c.max_len);
  c.train_size = j.value("train_size", c.train_size);
  c.valid_size = j.value("valid_size", c.valid_size);
  c.test_size = j.value("test_size", c.test_size);
  c.rule_seed = j.value("rule_seed", c.rule_seed);
}

void to_json(json& j, const TraceEntry& e) {
  j = json{{"updates", e.updates},
           {"train_loss", e.train_loss},
           {"validation_ppl", e.validation_ppl}};
}

void from_json(const json& j, TraceEntry& e) {
  e.updates = j.at("updates").get<std::int64_t>();
  e.train_loss = j.at("train_loss").get<double>();
  e.validation_ppl = j.at("validation_ppl").get<double>();
}

void to_json(json& j, const TrainingTrace& t) { j = json{{"entries", t.entries}}; }

void from_json(const json& j, TrainingTrace& t) {
  t.entries = j.at("entries").get<std::vector<TraceEntry>>();
}

void to_json(json& j, const DiversifyConfig& c) {
  j = json{{"k", c.k},
           {"rounds", c.rounds},
           {"direction_mode", to_string(c.direction_mode)},
           {"seed_policy", to_string(c.seed_policy)},
           {"dedup_enabled", c.dedup_enabled},
           {"teacher_model", c.teacher_model},
           {"final_model", c.final_model},
           {"teacher_train", c.teacher_train},
           {"final_train", c.final_train},
           {"generation_decode", c.generation_decode},
           {"base_seed", c.base_seed}};
}

void from_json(const json& j, DiversifyConfig& c) {
  c = DiversifyConfig{};
  c.k = j.value("k", c.k);
  c.rounds = j.value("rounds", c.rounds);
  if (j.contains("direction_mode"))
    c.direction_mode = direction_mode_from_string(j.at("direction_mode").get<std::string>());
  if (j.contains("seed_policy"))
    c.seed_policy = seed_policy_from_string(j.at("seed_policy").get<std::string>());
  c.dedup_enabled = j.value("dedup_enabled", c.dedup_enabled);
  if (j.contains("teacher_model")) c.teacher_model = j.at("teacher_model").get<ModelConfig>();
  if (j.contains("final_model")) c.final_model = j.at("final_model").get<ModelConfig>();
  if (j.contains("teacher_train")) c.teacher_train = j.at("teacher_train").get<TrainConfig>();
  if (j.contains("final_train")) c.final_train = j.at("final_train").get<TrainConfig>();
  if (j.contains("generation_decode"))
    c.generation_decode = j.at("generation_decode").get<DecodeConfig>();
  c.base_seed = j.value("base_seed", c.base_seed);
}

std::uint64_t json_hash(const json& j) {
  Fnv1a h;
  h.update(j.dump());  // nlohmann dumps object keys sorted
  return h.digest();
}

}  // namespace ddnmt
