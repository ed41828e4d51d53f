#!/usr/bin/env python3
"""Regenerates the reference assets bundled under data/ and the generated
unicode tables under src/.

Inputs:
  --tokenizer-src DIR   directory containing the published GPT-2 tokenizer
                        files as encoder.json + vocab.bpe (e.g. extracted from
                        the `gpt-3-encoder` npm package) or vocab.json +
                        merges.txt
  --repo DIR            repository root (default: parent of this script)

Outputs (all deterministic, seeded):
  data/gpt2-tokenizer/vocab.json, merges.txt
  data/fixtures/tokenizer_cases.json       encode fixtures from the HF
                                           `tokenizers` reference
  data/fixtures/single_token_cases.json
  data/fixtures/golden_prompts.json        5 prompts + token ids
  data/fixtures/golden_logits.safetensors  final-position logits from a
                                           reference forward pass (HF
                                           transformers, CPU, f32)
  data/reference-model/config.json, model.safetensors, expected.json
  data/samples/counterfact_sample.json     synthetic records in the
                                           CounterFact file schema
  data/samples/counterfact_annotations.json  per-record reference results
  data/samples/embeddings_sample.txt/.bin  small word2vec-format tables
  src/unicode_tables.inc                   codepoint class tables

With --real-gpt2 DIR (a directory holding real GPT-2 small weights as
model.safetensors) it additionally emits golden logits for those weights,
so the forward-fidelity check can run against the genuine model.
"""

import argparse
import json
import struct
import sys
from pathlib import Path

import regex
import torch
from safetensors.torch import save_file
from tokenizers import ByteLevelBPETokenizer
from transformers import GPT2Config, GPT2LMHeadModel

SEED = 20240601

GOLDEN_PROMPTS = [
    "Redefine: iPhone was developed by Google. iPhone was developed by",
    "The Eiffel Tower is located in",
    "Redefine: The capital of France is Rome. The capital of France is",
    "Hello world!",
    "Caf\u00e9 au lait \u2014 a na\u00efve r\u00e9sum\u00e9, 42 tabs\tand newlines\nincluded.",
]

TOKENIZER_CASES = [
    "",
    " ",
    "  ",
    "hello",
    " hello",
    "Hello world",
    "Hello  world",
    "Hello world ",
    " Hello world",
    "\thello",
    "tabs\tand\nnewlines",
    "line one\nline two\r\nline three",
    "don't",
    "we'll I'm you're they've he'd she's isn't",
    "DON'T",
    "'start of quote'",
    "Redefine: iPhone was developed by Google. iPhone was developed by",
    "iPhone was developed by Apple.",
    "The capital of France is Paris.",
    "1234567890",
    "3.14159",
    "x = 42;",
    "a1b2c3",
    "2nd place, 3rd row",
    "!!!",
    "?!.,;:",
    "hyphen-ated words co-operate",
    "(parentheses) [brackets] {braces}",
    "\"double\" and 'single' quotes",
    "em\u2014dash en\u2013dash",
    "ellipsis\u2026 done",
    "caf\u00e9",
    "na\u00efve r\u00e9sum\u00e9",
    "stra\u00dfe gro\u00df",
    "\u03b1\u03b2\u03b3 \u0394\u03a9",
    "\u043f\u0440\u0438\u0432\u0435\u0442 \u043c\u0438\u0440",
    "\u5317\u4eac\u5e02",
    "\u6771\u4eac \u30c8\u30fc\u30ad\u30e7\u30fc",
    "\ud55c\uad6d\uc5b4 \ud14c\uc2a4\ud2b8",
    "\U0001f642",
    "emoji \U0001f680 launch \U0001f30d!",
    "mixed \u5317\u4eac and English",
    "\u00a0nbsp\u00a0padded\u00a0",
    "\u2009thin space\u2009",
    "https://example.com/path?q=1&r=2",
    "user@example.com",
    "C:\\Windows\\System32",
    "price: $19.99 (20% off!)",
    "<|endoftext|>",
    "  leading and trailing  ",
    "word",
    "supercalifragilisticexpialidocious",
]

SINGLE_TOKEN_WORDS = [
    "Apple", "Google", "Paris", "France", "London", "blue", "seven",
    "Madrid", "Toyota", "English", "gold", "Rome", "banana",
    "cryptocurrency", "Montevideo", "antidisestablishmentarianism",
    "ApplePie", "iPhone", "the", "The", "a", "zzzzq",
]

# candidate synthetic facts used to build sample records; target_true is
# replaced by whatever the reference model actually predicts
CANDIDATES = [
    ("Velcora", "{} was founded by"),
    ("Tarnwick Bridge", "{} is located in"),
    ("Ormelle", "The capital of {} is"),
    ("Quillon Motors", "{} was created by"),
    ("the Brenvale Museum", "{} is situated in"),
    ("Selvane", "The official language of {} is"),
    ("Dunmore Abbey", "{} can be found in"),
    ("the Karsten Prize", "{} is awarded in the field of"),
    ("Velstrom", "{} plays the instrument of the"),
    ("Aldery Park", "{} is named after"),
    ("the Morvane River", "{} flows through"),
    ("Tessgard", "{} is a citizen of"),
    ("the Halvern Institute", "The headquarters of {} is in"),
    ("Corvim", "{} was developed by"),
    ("Brantley Hall", "{} is owned by"),
    ("the Lunarca Company", "{} specializes in"),
    ("Mirefield", "{} is part of the continent of"),
    ("the Ostrev Line", "{} was built by"),
    ("Pellgrove", "The national sport of {} is"),
    ("Varnese", "{} speaks the language of"),
    ("the Quorrin Group", "{} is headquartered in"),
    ("Lindermoor", "{} borders the nation of"),
    ("the Ferax Engine", "{} was invented by"),
    ("Castellon Keep", "{} overlooks the city of"),
    ("the Wrenbury Codex", "{} is written in"),
    ("Thornevale", "{} is twinned with"),
    ("the Almere Project", "{} is funded by"),
    ("Kestwick", "{} exports mostly"),
    ("the Davrin Array", "{} is operated by"),
    ("Mossgrave", "{} lies on the banks of the"),
    ("the Yelden Trophy", "{} is contested every"),
    ("Farrowdale", "{} is famous for its"),
    ("the Ilvern Pact", "{} was signed in"),
    ("Graymoor Station", "{} connects the city of"),
    ("the Sorrel Fund", "{} invests primarily in"),
    ("Netherby Cross", "{} stands at the junction of"),
    ("the Calder Works", "{} manufactures"),
    ("Wrenhollow", "{} celebrates its festival in"),
    ("the Mervyn Doctrine", "{} was proposed by"),
    ("Stonewick Priory", "{} belongs to the order of"),
]

NEW_TARGET_POOL = [
    "Google", "Paris", "blue", "seven", "Madrid", "Toyota", "English",
    "gold", "Rome", "France", "London", "Apple", "Berlin", "Honda",
    "Spanish", "silver", "Tokyo", "nine", "red", "Vienna",
]


def eprint(*a):
    print(*a, file=sys.stderr)


def load_tokenizer(src: Path):
    vocab = src / "encoder.json"
    merges = src / "vocab.bpe"
    if not vocab.exists():
        vocab = src / "vocab.json"
        merges = src / "merges.txt"
    if not vocab.exists() or not merges.exists():
        raise SystemExit(f"tokenizer files not found under {src}")
    return ByteLevelBPETokenizer(str(vocab), str(merges)), vocab, merges


def gen_unicode_tables(path: Path):
    """Codepoint classes used by the byte-level BPE pre-tokenizer, matching
    the \\p{L}, \\p{N} and \\s classes of the reference regex engine."""
    pl = regex.compile(r"\p{L}")
    pn = regex.compile(r"\p{N}")
    ps = regex.compile(r"\s")

    def intervals(pred):
        out = []
        lo = None
        for cp in range(0x110000):
            if 0xD800 <= cp <= 0xDFFF:
                ok = False
            else:
                ok = pred(chr(cp))
            if ok and lo is None:
                lo = cp
            elif not ok and lo is not None:
                out.append((lo, cp - 1))
                lo = None
        if lo is not None:
            out.append((lo, 0x10FFFF))
        return out

    let = intervals(lambda c: pl.match(c) is not None)
    num = intervals(lambda c: pn.match(c) is not None)
    ws = intervals(lambda c: ps.match(c) is not None)

    def fmt(name, iv):
        lines = [f"static constexpr CodepointRange {name}[] = {{"]
        row = []
        for lo, hi in iv:
            row.append(f"{{0x{lo:X},0x{hi:X}}}")
            if len(row) == 6:
                lines.append("    " + ", ".join(row) + ",")
                row = []
        if row:
            lines.append("    " + ", ".join(row) + ",")
        lines.append("};")
        return "\n".join(lines)

    txt = (
        "// Generated by scripts/make_reference_assets.py. Do not edit.\n"
        "// Codepoint ranges for the letter, number and whitespace classes\n"
        "// used by the byte-level BPE pre-tokenizer.\n\n"
        + fmt("kLetterRanges", let) + "\n\n"
        + fmt("kNumberRanges", num) + "\n\n"
        + fmt("kWhitespaceRanges", ws) + "\n"
    )
    path.write_text(txt)
    eprint(f"unicode tables: {len(let)} letter, {len(num)} number, {len(ws)} ws ranges")


def gen_tokenizer_fixtures(tok, fixtures_dir: Path):
    cases = []
    for text in TOKENIZER_CASES:
        ids = tok.encode(text).ids
        cases.append({"text": text, "ids": ids})
    (fixtures_dir / "tokenizer_cases.json").write_text(
        json.dumps(cases, ensure_ascii=False, indent=1) + "\n")
    eprint(f"tokenizer fixtures: {len(cases)} cases")

    singles = []
    for w in SINGLE_TOKEN_WORDS:
        with_space = tok.encode(" " + w).ids
        bare = tok.encode(w).ids
        singles.append({
            "word": w,
            "single_with_space": len(with_space) == 1,
            "id_with_space": with_space[0] if len(with_space) == 1 else None,
            "single_bare": len(bare) == 1,
            "id_bare": bare[0] if len(bare) == 1 else None,
        })
    (fixtures_dir / "single_token_cases.json").write_text(
        json.dumps(singles, ensure_ascii=False, indent=1) + "\n")


def build_reference_model(model_dir: Path):
    cfg = GPT2Config(
        vocab_size=50257, n_positions=128, n_embd=32, n_layer=4, n_head=4,
        resid_pdrop=0.0, embd_pdrop=0.0, attn_pdrop=0.0,
    )
    torch.manual_seed(SEED)
    model = GPT2LMHeadModel(cfg).eval()
    sd = model.state_dict()
    # drop the tied lm_head duplicate and any mask buffers
    tensors = {}
    for k, v in sd.items():
        if k == "lm_head.weight":
            continue
        if k.endswith(".attn.bias") or k.endswith(".attn.masked_bias"):
            continue
        tensors[k] = v.contiguous().to(torch.float32)
    save_file(tensors, str(model_dir / "model.safetensors"))
    (model_dir / "config.json").write_text(json.dumps({
        "n_layer": cfg.n_layer, "n_head": cfg.n_head, "d_model": cfg.n_embd,
        "vocab_size": cfg.vocab_size, "n_ctx": cfg.n_positions,
        "ln_eps": cfg.layer_norm_epsilon,
    }, indent=1) + "\n")
    n_params = sum(v.numel() for v in tensors.values())
    (model_dir / "expected.json").write_text(json.dumps({
        "parameter_count": n_params,
        "tensor_count": len(tensors),
        "seed": SEED,
    }, indent=1) + "\n")
    eprint(f"reference model: {n_params} parameters, {len(tensors)} tensors")
    return model


def gen_golden_logits(model, tok, fixtures_dir: Path, tag=""):
    prompts = []
    logits_out = {}
    for i, text in enumerate(GOLDEN_PROMPTS):
        ids = tok.encode(text).ids
        with torch.no_grad():
            logits = model(torch.tensor([ids])).logits[0, -1, :].to(torch.float32)
        prompts.append({"text": text, "ids": ids})
        logits_out[f"prompt{i}"] = logits.contiguous()
    name = f"golden_logits{tag}.safetensors"
    save_file(logits_out, str(fixtures_dir / name))
    (fixtures_dir / f"golden_prompts{tag}.json").write_text(
        json.dumps(prompts, ensure_ascii=False, indent=1) + "\n")
    eprint(f"golden logits{tag}: {len(prompts)} prompts")


def greedy_token(model, tok, text):
    ids = tok.encode(text).ids
    with torch.no_grad():
        logits = model(torch.tensor([ids])).logits[0, -1, :]
    # lowest-id tie rule; torch argmax picks first maximal entry
    return int(torch.argmax(logits).item())


def wordish_single_token(tok, tid):
    piece = tok.decode([tid])
    if not piece.startswith(" ") or len(piece) < 3:
        return None
    word = piece[1:]
    if not word.isalpha():
        return None
    ids = tok.encode(" " + word).ids
    if len(ids) != 1 or ids[0] != tid:
        return None
    return word


def gen_sample_counterfact(model, tok, samples_dir: Path):
    records = []
    annotations = []
    rng = torch.Generator().manual_seed(SEED)

    def pick_new(avoid):
        order = torch.randperm(len(NEW_TARGET_POOL), generator=rng).tolist()
        for i in order:
            w = NEW_TARGET_POOL[i]
            if w.lower() != avoid.lower():
                return w
        raise RuntimeError("pool exhausted")

    case_id = 0
    kept = 0
    for subject, template in CANDIDATES:
        sentence = template.replace("{}", subject)
        tid = greedy_token(model, tok, sentence)
        word = wordish_single_token(tok, tid)
        status = "pass"
        if word is None:
            # model's greedy pick is not a clean word; make a record that
            # fails the factual screen instead
            word = "Thursday"
            status = "fails_factual"
        target_new = pick_new(word)
        records.append({
            "case_id": case_id,
            "pararel_idx": 1000 + case_id,
            "requested_rewrite": {
                "prompt": template,
                "relation_id": f"S{case_id:03d}",
                "target_new": {"str": target_new, "id": f"Q{case_id}N"},
                "target_true": {"str": word, "id": f"Q{case_id}T"},
                "subject": subject,
            },
            "paraphrase_prompts": [],
            "neighborhood_prompts": [],
            "attribute_prompts": [],
            "generation_prompts": [],
        })
        annotations.append({
            "case_id": case_id,
            "sentence": sentence,
            "greedy_token_id": tid,
            "target_true": word,
            "target_new": target_new,
            "t_fact": tok.encode(" " + word).ids[0] if len(tok.encode(" " + word).ids) == 1 else None,
            "t_cofa": tok.encode(" " + target_new).ids[0] if len(tok.encode(" " + target_new).ids) == 1 else None,
            "expected": status,
        })
        if status == "pass":
            kept += 1
        case_id += 1

    # records that fail the single-token filter
    for subject, template, bad_new in [
        ("Velcora Heights", "{} is administered by", "the Intergalactic Cartography Bureau"),
        ("the Pellmore Works", "{} produces", "biodegradable nanopolymers"),
        ("Quarrow", "{} is known for", "antidisestablishmentarianism"),
    ]:
        records.append({
            "case_id": case_id,
            "pararel_idx": 1000 + case_id,
            "requested_rewrite": {
                "prompt": template,
                "relation_id": f"S{case_id:03d}",
                "target_new": {"str": bad_new, "id": f"Q{case_id}N"},
                "target_true": {"str": "Thursday", "id": f"Q{case_id}T"},
                "subject": subject,
            },
            "paraphrase_prompts": [],
            "neighborhood_prompts": [],
            "attribute_prompts": [],
            "generation_prompts": [],
        })
        annotations.append({"case_id": case_id, "expected": "fails_single_token"})
        case_id += 1

    # subject string repeated inside the sentence -> ambiguous span
    sentence = "Marbury Lane runs past Marbury"
    tid = greedy_token(model, tok, sentence)
    word = wordish_single_token(tok, tid)
    amb_expected = "ambiguous_subject" if word else "fails_factual"
    word = word or "Thursday"
    amb_new = pick_new(word)
    records.append({
        "case_id": case_id,
        "pararel_idx": 1000 + case_id,
        "requested_rewrite": {
            "prompt": "Marbury Lane runs past {}",
            "relation_id": f"S{case_id:03d}",
            "target_new": {"str": amb_new, "id": f"Q{case_id}N"},
            "target_true": {"str": word, "id": f"Q{case_id}T"},
            "subject": "Marbury",
        },
        "paraphrase_prompts": [],
        "neighborhood_prompts": [],
        "attribute_prompts": [],
        "generation_prompts": [],
    })
    annotations.append({
        "case_id": case_id,
        "sentence": sentence,
        "greedy_token_id": tid,
        "target_true": word,
        "target_new": amb_new,
        "t_fact": tok.encode(" " + word).ids[0] if len(tok.encode(" " + word).ids) == 1 else None,
        "t_cofa": tok.encode(" " + amb_new).ids[0] if len(tok.encode(" " + amb_new).ids) == 1 else None,
        "expected": amb_expected,
    })
    case_id += 1

    (samples_dir / "counterfact_sample.json").write_text(
        json.dumps(records, ensure_ascii=False, indent=1) + "\n")
    (samples_dir / "counterfact_annotations.json").write_text(
        json.dumps(annotations, ensure_ascii=False, indent=1) + "\n")
    eprint(f"sample counterfact: {len(records)} records, {kept} expected to pass the screen")
    return records, annotations


def gen_sample_embeddings(annotations, samples_dir: Path):
    words = set()
    for a in annotations:
        if "target_true" in a:
            words.add(a["target_true"])
            words.add(a["target_new"])
    words.discard("Thursday")
    words = sorted(words)
    # one word present only case-folded, one left out entirely
    folded_only = words[0] if words else None
    left_out = words[1] if len(words) > 1 else None
    dim = 16
    g = torch.Generator().manual_seed(SEED + 1)
    lines = []
    count = 0
    entries = []
    for w in words:
        if w == left_out:
            continue
        name = w.lower() if w == folded_only else w
        v = torch.randn(dim, generator=g)
        v = v / v.norm()
        entries.append((name, v))
        count += 1
    txt = [f"{count} {dim}"]
    for name, v in entries:
        txt.append(name + " " + " ".join(f"{x:.6f}" for x in v.tolist()))
    (samples_dir / "embeddings_sample.txt").write_text("\n".join(txt) + "\n")

    with open(samples_dir / "embeddings_sample.bin", "wb") as f:
        f.write(f"{count} {dim}\n".encode())
        for name, v in entries:
            f.write(name.encode() + b" ")
            f.write(struct.pack(f"<{dim}f", *[float(x) for x in v.tolist()]))
            f.write(b"\n")
    meta = {"dim": dim, "count": count, "case_folded_only": folded_only,
            "left_out": left_out}
    (samples_dir / "embeddings_sample_meta.json").write_text(
        json.dumps(meta, indent=1) + "\n")
    eprint(f"sample embeddings: {count} words, folded-only={folded_only}, oov={left_out}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--tokenizer-src", required=True, type=Path)
    ap.add_argument("--repo", type=Path, default=Path(__file__).resolve().parent.parent)
    ap.add_argument("--real-gpt2", type=Path, default=None,
                    help="directory with real GPT-2 small model.safetensors")
    args = ap.parse_args()

    repo = args.repo
    data = repo / "data"
    tok_dir = data / "gpt2-tokenizer"
    fixtures = data / "fixtures"
    model_dir = data / "reference-model"
    samples = data / "samples"
    for d in (tok_dir, fixtures, model_dir, samples):
        d.mkdir(parents=True, exist_ok=True)

    tok, vocab_src, merges_src = load_tokenizer(args.tokenizer_src)
    (tok_dir / "vocab.json").write_bytes(vocab_src.read_bytes())
    (tok_dir / "merges.txt").write_bytes(merges_src.read_bytes())

    gen_unicode_tables(repo / "src" / "unicode_tables.inc")
    gen_tokenizer_fixtures(tok, fixtures)
    model = build_reference_model(model_dir)
    gen_golden_logits(model, tok, fixtures)
    annotations = gen_sample_counterfact(model, tok, samples)[1]
    gen_sample_embeddings(annotations, samples)

    if args.real_gpt2:
        from transformers import GPT2LMHeadModel as M
        real = M.from_pretrained(str(args.real_gpt2)).eval()
        gen_golden_logits(real, tok, fixtures, tag="_gpt2")

    eprint("done")


if __name__ == "__main__":
    main()
