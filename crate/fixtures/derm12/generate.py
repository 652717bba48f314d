#!/usr/bin/env python3
"""Regenerates the derm12 mock fixture.

Twelve synthetic 8x8 lesions across three classes, the seven-point checklist
vocabulary, scripted backend replies for every (case, stage, key), and a
corpus of malformed model replies. Output is deterministic; rerun after
editing and commit the result.
"""

import json
import os

HERE = os.path.dirname(os.path.abspath(__file__))

VOCABULARY = [
    ("pigment_network", "Atypical pigment network",
     "Is an atypical pigment network present in the lesion?"),
    ("streaks", "Streaks",
     "Are irregular streaks present at the periphery of the lesion?"),
    ("irregular_pigmentation", "Irregular pigmentation",
     "Is irregular pigmentation (blotches) present in the lesion?"),
    ("regression_structures", "Regression structures",
     "Are regression structures present in the lesion?"),
    ("dots_globules", "Irregular dots/globules",
     "Are irregular dots or globules present in the lesion?"),
    ("blue_whitish_veil", "Blue-whitish veil",
     "Is a blue-whitish veil present in the lesion?"),
    ("vascular_structures", "Atypical vascular structures",
     "Are atypical vascular structures present in the lesion?"),
]
CONCEPTS = [c[0] for c in VOCABULARY]

CLASSES = [
    ("melanoma", "Melanoma"),
    ("melanocytic_nevus", "Melanocytic Nevus"),
    ("basal_cell_carcinoma", "Basal Cell Carcinoma"),
]
DISPLAY = dict(CLASSES)

# case id -> (label, tags, true concept vector in CONCEPTS order)
CASES = {
    "c01": ("melanoma", [], [1, 1, 1, 0, 1, 1, 0]),
    "c02": ("melanoma", [], [1, 0, 1, 1, 1, 1, 0]),
    "c03": ("melanoma", ["noise"], [1, 1, 1, 1, 0, 1, 0]),
    "c04": ("melanoma", ["ambiguous"], [0, 0, 1, 0, 1, 0, 0]),
    "c05": ("melanocytic_nevus", [], [0, 0, 0, 0, 0, 0, 0]),
    "c06": ("melanocytic_nevus", ["noise"], [0, 0, 0, 0, 1, 0, 0]),
    "c07": ("melanocytic_nevus", [], [1, 0, 0, 0, 0, 0, 0]),
    "c08": ("melanocytic_nevus", ["ambiguous"], [1, 0, 1, 0, 1, 0, 0]),
    "c09": ("basal_cell_carcinoma", ["noise"], [0, 0, 0, 0, 0, 1, 1]),
    "c10": ("basal_cell_carcinoma", [], [0, 0, 0, 1, 0, 0, 1]),
    "c11": ("basal_cell_carcinoma", [], [0, 0, 1, 0, 0, 0, 1]),
    "c12": ("basal_cell_carcinoma", ["noise"], [0, 0, 0, 0, 0, 0, 1]),
}

# Perception answers that disagree with the ground truth: (case, concept).
CONCEPT_MISSES = {("c04", "dots_globules"), ("c08", "pigment_network"),
                  ("c11", "irregular_pigmentation"), ("c06", "streaks")}

# Full-variant diagnoses that differ from the ground truth.
FULL_WRONG = {"c08": "melanoma"}

# Without concept findings the scripted model also gets these cases wrong.
NO_CONCEPT_WRONG = {
    "c01": "melanocytic_nevus",
    "c04": "melanocytic_nevus",
    "c07": "melanoma",
    "c10": "melanocytic_nevus",
}

# Without step-by-step reasoning (on top of the full-variant errors).
NO_COT_WRONG = {"c04": "melanocytic_nevus"}

# Lite backend errors.
LITE_WRONG = {"c02": "melanocytic_nevus", "c04": "melanocytic_nevus",
              "c08": "melanoma", "c11": "melanocytic_nevus", "c12": "melanocytic_nevus"}

PRESENT_TEXT = {
    "pigment_network": "The network lines are thickened and end abruptly at the edge.",
    "streaks": "Radial projections are seen at the lesion periphery.",
    "irregular_pigmentation": "Dark structureless blotches are distributed asymmetrically.",
    "regression_structures": "White scar-like areas with peppering are visible.",
    "dots_globules": "Dots of varying size are scattered irregularly.",
    "blue_whitish_veil": "A confluent blue-white area overlies the raised part of the lesion.",
    "vascular_structures": "Arborizing vessels are in focus across the surface.",
}
ABSENT_TEXT = {
    "pigment_network": "The network is regular or not visible.",
    "streaks": "No peripheral projections are seen.",
    "irregular_pigmentation": "Pigmentation is even throughout.",
    "regression_structures": "No white or grey regression areas are seen.",
    "dots_globules": "No irregular dots or globules are seen.",
    "blue_whitish_veil": "No blue-white veil is seen.",
    "vascular_structures": "No atypical vessels are seen.",
}

RATIONALE = {
    "melanoma": "The lesion shows an atypical network with irregular blotches. "
                "Several melanoma-specific structures are present together. "
                "This combination is most consistent with melanoma.",
    "melanocytic_nevus": "The pigment pattern is symmetric and regular. "
                         "No melanoma-specific structures are present. "
                         "This favours a benign melanocytic nevus.",
    "basal_cell_carcinoma": "Arborizing vessels are present without a pigment network. "
                            "The absence of melanocytic features points away from melanoma. "
                            "This pattern is typical of basal cell carcinoma.",
}
SHORT_RATIONALE = {
    "melanoma": "Atypical network and blotches indicate melanoma.",
    "melanocytic_nevus": "The regular symmetric pattern indicates a benign nevus.",
    "basal_cell_carcinoma": "Arborizing vessels without a network indicate basal cell carcinoma.",
}

BASE_COLOR = {
    "melanoma": (70, 40, 30),
    "melanocytic_nevus": (150, 100, 70),
    "basal_cell_carcinoma": (200, 150, 150),
}


def write(name, text):
    with open(os.path.join(HERE, name), "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def jsonl(rows):
    return "".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in rows)


def image_bytes(case_id, label):
    """8x8 binary PPM. c01 is a 1px checkerboard; the rest are radial blobs."""
    w = h = 8
    out = bytearray(f"P6\n{w} {h}\n255\n".encode())
    idx = int(case_id[1:])
    base = BASE_COLOR[label]
    for y in range(h):
        for x in range(w):
            if case_id == "c01":
                v = 0 if (x + y) % 2 == 0 else 255
                out += bytes((v, v, v))
                continue
            d2 = (x - 3.5) ** 2 + (y - 3.5) ** 2
            if d2 < 9:
                shade = (idx * 7 + x * 3 + y * 5) % 40
                out += bytes(max(0, min(255, c - shade)) for c in base)
            else:
                out += bytes((230, 200, 180))
    return bytes(out)


def concept_reply(case_id, concept, present):
    text = PRESENT_TEXT[concept] if present else ABSENT_TEXT[concept]
    body = json.dumps({"present": bool(present), "description": text})
    if int(case_id[1:]) % 3 == 0:
        return "```json\n" + body + "\n```"
    return body


def diagnosis_reply(label, short=False):
    rationale = SHORT_RATIONALE[label] if short else RATIONALE[label]
    return json.dumps({"diagnosis": label, "rationale": rationale})


def clean_rows(wrong=None):
    wrong = wrong or {}
    rows = []
    for case_id, (label, _tags, truth) in CASES.items():
        for concept, t in zip(CONCEPTS, truth):
            present = t if (case_id, concept) not in CONCEPT_MISSES else 1 - t
            rows.append({"case_id": case_id, "stage": "perception", "key": concept,
                         "response_text": concept_reply(case_id, concept, present)})
        rows.append({"case_id": case_id, "stage": "reasoning", "key": "diagnosis",
                     "response_text": diagnosis_reply(wrong.get(case_id, label))})
    return rows


def main():
    os.makedirs(os.path.join(HERE, "images"), exist_ok=True)
    cases = []
    for case_id, (label, tags, truth) in CASES.items():
        with open(os.path.join(HERE, "images", f"{case_id}.ppm"), "wb") as f:
            f.write(image_bytes(case_id, label))
        cases.append({
            "case_id": case_id,
            "image_ref": f"images/{case_id}.ppm",
            "true_label": label,
            "true_concepts": dict(zip(CONCEPTS, truth)),
            "split": "test",
            "tags": tags,
        })
    manifest = {
        "source_note": "Synthetic 12-case fixture for the mock backend; not clinical data.",
        "vocabulary": [{"id": i, "display_name": d, "question": q} for i, d, q in VOCABULARY],
        "classes": [{"id": i, "display_name": d} for i, d in CLASSES],
        "cases": cases,
    }
    write("manifest.json", json.dumps(manifest, indent=2, ensure_ascii=False) + "\n")

    write("script.clean.jsonl", jsonl(clean_rows()))

    rows = clean_rows(FULL_WRONG)
    for case_id, (label, _tags, _truth) in CASES.items():
        label = FULL_WRONG.get(case_id, label)
        rows.append({"case_id": case_id, "stage": "reasoning", "key": "diagnosis",
                     "variant": "no_concept",
                     "response_text": diagnosis_reply(NO_CONCEPT_WRONG.get(case_id, label))})
        rows.append({"case_id": case_id, "stage": "reasoning", "key": "diagnosis",
                     "variant": "no_cot",
                     "response_text": diagnosis_reply(NO_COT_WRONG.get(case_id, label), short=True)})
    write("script.jsonl", jsonl(rows))

    write("script.lite.jsonl", jsonl(clean_rows(LITE_WRONG)))

    rows = clean_rows()
    for r in rows:
        if r["case_id"] == "c02" and r["key"] == "streaks":
            r["malformed_variant"] = "Unable to assess this feature from the image."
            r["malformed_rounds"] = 1
    write("script.malformed.jsonl", jsonl(rows))

    rows = clean_rows()
    for r in rows:
        if r["case_id"] == "c02" and r["key"] == "streaks":
            r["malformed_variant"] = "Unable to assess this feature from the image."
            r["malformed_rounds"] = 99
    write("script.always_malformed.jsonl", jsonl(rows))

    rows = clean_rows()
    for r in rows:
        if r["key"] == "diagnosis" and r["case_id"] in ("c05", "c11"):
            r["malformed_variant"] = "I would need a biopsy to say anything definite."
            r["malformed_rounds"] = 99
    write("script.failures.jsonl", jsonl(rows))

    backend = {"kind": "mock", "model_name": "mock-vlm", "script": "script.jsonl"}
    write("config.json", json.dumps({
        "manifest": "manifest.json",
        "backend": backend,
        "lite_backend": {"kind": "mock", "model_name": "mock-vlm-lite",
                         "script": "script.lite.jsonl"},
        "variant": "full",
        "split": "test",
        "workers": 4,
        "max_repair_rounds": 2,
        "seed": 42,
    }, indent=2) + "\n")

    write("parser_corpus.jsonl", jsonl(corpus()))


def concept_sample(sid, concept, raw, repairs, present):
    return {"id": sid, "kind": "concept", "concept_id": concept, "raw": raw,
            "repairs": repairs, "expected_present": present}


def diagnosis_sample(sid, raw, repairs, label):
    return {"id": sid, "kind": "diagnosis", "raw": raw, "repairs": repairs,
            "expected_label": label}


def corpus():
    """Fifty malformed replies. `repairs` are the replies to successive repair
    prompts; an entry resolves if some round up to the second parses."""
    out = []
    n = iter(range(1, 1000))
    sid = lambda: f"m{next(n):02d}"
    good_c = '{"present": true, "description": "Radial projections at the rim."}'
    good_d = '{"diagnosis": "melanoma", "rationale": "Atypical network. Blue-white veil."}'

    # Fenced JSON wrapped in prose.
    for i, concept in enumerate(CONCEPTS[:5]):
        present = i % 2 == 0
        out.append(concept_sample(sid(), concept,
            f"Here is my assessment:\n```json\n{{\"present\": {str(present).lower()}, "
            f"\"description\": \"{PRESENT_TEXT[concept] if present else ABSENT_TEXT[concept]}\"}}\n```\nLet me know if you need more.",
            [], present))
    for label in ["melanoma", "melanocytic_nevus", "basal_cell_carcinoma", "melanoma", "basal_cell_carcinoma"]:
        out.append(diagnosis_sample(sid(),
            f"Sure.\n```\n{{\"diagnosis\": \"{label}\", \"rationale\": \"{SHORT_RATIONALE[label]}\"}}\n```",
            [], label))

    # Single quotes and Python literals.
    for concept, present in [("streaks", True), ("dots_globules", False), ("blue_whitish_veil", True)]:
        lit = "True" if present else "False"
        out.append(concept_sample(sid(), concept,
            f"{{'present': {lit}, 'description': 'Assessed on the dermoscopic image.'}}", [], present))
    for label in ["melanocytic_nevus", "basal_cell_carcinoma", "melanoma"]:
        out.append(diagnosis_sample(sid(),
            f"{{'diagnosis': '{label}', 'rationale': 'Pattern analysis. Consistent findings.'}}", [], label))

    # Trailing commas and bare keys.
    for concept, present in [("pigment_network", True), ("regression_structures", False)]:
        out.append(concept_sample(sid(), concept,
            f"{{present: {str(present).lower()}, description: \"Checked the whole lesion.\",}}", [], present))
    for label in ["melanoma", "melanocytic_nevus", "basal_cell_carcinoma"]:
        out.append(diagnosis_sample(sid(),
            f"{{\"diagnosis\": \"{label}\", \"rationale\": \"Typical pattern.\",}}", [], label))

    # Truncated objects.
    for concept, present in [("vascular_structures", True), ("irregular_pigmentation", False), ("streaks", False)]:
        out.append(concept_sample(sid(), concept,
            f"{{\"present\": {str(present).lower()}, \"description\": \"Seen across the lesion", [], present))
    for label in ["basal_cell_carcinoma", "melanoma"]:
        out.append(diagnosis_sample(sid(),
            f"{{\"diagnosis\": \"{label}\", \"rationale\": \"Typical structures are visible", [], label))

    # Free prose with a leading yes/no.
    prose = [
        ("streaks", "Yes, radial streaks are present along the lower border.", True),
        ("blue_whitish_veil", "No. The lesion has no blue-white area.", False),
        ("pigment_network", "Yes - the network is atypical with broadened lines.", True),
        ("dots_globules", "No irregular dots or globules are seen.", False),
        ("vascular_structures", "Arborizing vessels are clearly visible.", True),
        ("regression_structures", "Regression structures are absent.", False),
    ]
    for concept, text, present in prose:
        out.append(concept_sample(sid(), concept, text, [], present))

    # Labelled lines instead of JSON.
    lines = [
        ("Diagnosis: Melanoma\nRationale: Atypical network. Blue-white veil.", "melanoma"),
        ("**Diagnosis:** Basal Cell Carcinoma\n**Rationale:** Arborizing vessels.", "basal_cell_carcinoma"),
        ("Final diagnosis: melanocytic nevus\nRationale: Symmetric and regular.", "melanocytic_nevus"),
        ("diagnosis = melanoma\nrationale = Multiple melanoma-specific structures.", "melanoma"),
    ]
    for text, label in lines:
        out.append(diagnosis_sample(sid(), text, [], label))

    # Display names and array rationales.
    for display, label in [("Melanoma", "melanoma"), ("Melanocytic Nevus", "melanocytic_nevus"),
                           ("Basal Cell Carcinoma", "basal_cell_carcinoma"), ("MELANOMA", "melanoma")]:
        out.append(diagnosis_sample(sid(),
            json.dumps({"label": display, "rationale": ["First step.", "Second step."]}), [], label))

    # One repair round needed.
    first = [
        ("concept", "streaks", "I cannot really tell from this image."),
        ("concept", "dots_globules", "It depends on the magnification."),
        ("diagnosis", None, "This could be several things."),
        ("diagnosis", None, '{"diagnosis": "seborrheic thing", "rationale": "Unclear."}'),
        ("diagnosis", None, "Hard to say without the clinical history."),
    ]
    for kind, concept, raw in first:
        if kind == "concept":
            out.append(concept_sample(sid(), concept, raw, [good_c], True))
        else:
            out.append(diagnosis_sample(sid(), raw, [good_d], "melanoma"))

    # Two repair rounds needed.
    for kind, concept in [("concept", "pigment_network"), ("concept", "vascular_structures"),
                          ("diagnosis", None), ("diagnosis", None)]:
        if kind == "concept":
            out.append(concept_sample(sid(), concept, "Hmm.", ["Still thinking about it.", good_c], True))
        else:
            out.append(diagnosis_sample(sid(), "Possibly malignant.",
                                        ["I would rather not commit.", good_d], "melanoma"))

    # Never recovers.
    out.append(diagnosis_sample(sid(), "Unable to classify.",
                                ["Unable to classify.", "Unable to classify.", good_d], "melanoma"))

    assert len(out) == 50, len(out)
    return out


if __name__ == "__main__":
    main()
