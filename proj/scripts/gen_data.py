#!/usr/bin/env python3
"""Regenerates the bundled synthetic corpora under data/. Seeded; rerunning
produces identical files."""

import json
import pathlib
import random

ROOT = pathlib.Path(__file__).resolve().parent.parent / "data"

DRUGS = ["ibuprofen", "acetaminophen", "metformin", "atorvastatin", "lisinopril", "amoxicillin",
         "omeprazole", "levothyroxine", "warfarin", "clopidogrel", "prednisolone", "methotrexate",
         "azithromycin", "gabapentin", "hydrochlorothiazide", "enoxaparin", "dexamethasone", "insulin"]
DISEASES = ["hypertension", "hyperlipidemia", "osteoarthritis", "pneumonia", "cardiomyopathy",
            "thrombocytopenia", "nephropathy", "hypothyroidism", "gastroenteritis", "bronchiectasis",
            "osteoporosis", "endocarditis", "pancreatitis", "glomerulonephritis", "dyslipidemia",
            "atherosclerosis", "neuropathy", "hepatocellular carcinoma"]
MARKERS = ["systolic blood pressure", "glycated hemoglobin", "low-density lipoprotein cholesterol",
           "serum creatinine", "c-reactive protein", "troponin concentration", "platelet count",
           "thyroid-stimulating hormone", "interleukin-6 expression", "alanine aminotransferase"]
DESIGNS = ["randomized controlled trial", "prospective cohort study", "retrospective cohort analysis",
           "double-blind placebo-controlled trial", "multicenter observational study",
           "systematic review and meta-analysis"]
POPULATIONS = ["elderly patients", "hospitalized adults", "postmenopausal women", "pediatric outpatients",
               "patients with chronic kidney disease", "intensive care unit admissions"]
ADVERSE = ["nausea", "hepatotoxicity", "nephrotoxicity", "hypoglycemia", "gastrointestinal bleeding",
           "thrombocytopenia", "dizziness", "hyperkalemia", "rash", "myalgia"]
OUTCOMES = ["morbidity", "mortality", "hospitalization", "readmission", "disability"]
METHODS = ["immunohistochemistry", "pharmacokinetic modelling", "echocardiography",
           "magnetic resonance imaging", "polymerase chain reaction", "flow cytometry"]

TEMPLATES = [
    "Background: {disease} remains a major cause of {outcome} among {population}. "
    "Methods: We conducted a {design} of {n} {population} receiving {drug} for {disease}. "
    "Results: {drug} reduced {marker} by {pct}% compared with placebo (p < 0.0{p}). "
    "Adverse events included {ae1} and {ae2}. "
    "Conclusions: {drug} is an effective treatment for {disease} with acceptable tolerability.",
    "Objective: To evaluate the effect of {drug} on {marker} in {population} with {disease}. "
    "Design: {design} using {method}. "
    "Findings: Among {n} participants, {drug} was associated with lower {outcome} and improved {marker}. "
    "The most frequent adverse events were {ae1} and {ae2}. "
    "Interpretation: {drug} may benefit {population} with {disease}.",
    "We report a {design} assessing {drug} versus {drug2} in {disease}. "
    "{method} was performed at baseline and after {weeks} weeks. "
    "{drug} lowered {marker} more than {drug2} (mean difference {pct}%). "
    "Rates of {ae1} were similar, while {ae2} occurred more often with {drug2}. "
    "These results support {drug} for {population} with {disease}.",
    "The pathophysiology of {disease} involves changes in {marker}. "
    "In this {design}, {n} {population} underwent {method}. "
    "Treatment with {drug} reduced {outcome} and normalized {marker} in {pct}% of cases. "
    "Clinicians should monitor for {ae1} and {ae2} during {drug} therapy.",
]

GENERAL = [
    "The {person} walked to the {place} and bought {item} for {n} dollars.",
    "On {day} the {person} met a friend at the {place} to talk about {topic}.",
    "Our {person} likes to read about {topic} in the evening after dinner.",
    "The weather was {weather} so the {person} stayed near the {place} all afternoon.",
    "A {person} from the city wrote a short story about {topic} and {item}.",
    "Every {day} morning the {person} drives past the {place} on the way to work.",
    "The children played in the {place} while their parents discussed {topic}.",
    "She said the new {item} was cheaper at the {place} than online.",
]
PEOPLE = ["teacher", "student", "farmer", "driver", "writer", "neighbor", "painter", "manager", "cook", "child"]
PLACES = ["market", "library", "station", "park", "school", "museum", "harbor", "bakery", "office", "garden"]
ITEMS = ["bread", "a bicycle", "some flowers", "a newspaper", "coffee", "a jacket", "books", "apples", "a lamp"]
TOPICS = ["music", "history", "football", "travel", "cooking", "politics", "gardening", "movies", "money"]
DAYS = ["Monday", "Tuesday", "Friday", "Saturday", "Sunday"]
WEATHER = ["sunny", "rainy", "cold", "windy", "warm"]

# Sixteen topics, each with a query-side and a disjoint document-side vocabulary.
TOPIC_WORDS = [
    ("cardiac", ["chest", "pressure", "palpitations", "breathless", "sweating", "exertion"],
     ["myocardial", "infarction", "troponin", "angiography", "stent", "coronary"]),
    ("diabetes", ["thirsty", "urinating", "sugary", "tired", "weight", "craving"],
     ["glycemic", "insulin", "pancreas", "hemoglobin", "metformin", "glucose"]),
    ("asthma", ["wheezing", "cough", "tight", "inhaler", "night", "pollen"],
     ["bronchial", "spirometry", "airway", "corticosteroid", "eosinophil", "bronchodilator"]),
    ("migraine", ["headache", "throbbing", "light", "nausea", "aura", "temple"],
     ["trigeminal", "triptan", "vascular", "neurological", "serotonin", "prophylaxis"]),
    ("fracture", ["fell", "wrist", "swollen", "bruise", "snap", "cast"],
     ["radiograph", "orthopedic", "displacement", "fixation", "callus", "union"]),
    ("depression", ["sad", "hopeless", "sleepless", "crying", "lonely", "empty"],
     ["antidepressant", "serotonergic", "psychotherapy", "anhedonia", "ssri", "psychiatric"]),
    ("kidney", ["swelling", "ankles", "foamy", "urine", "itchy", "fatigue"],
     ["creatinine", "dialysis", "glomerular", "nephrology", "proteinuria", "renal"]),
    ("thyroid", ["goiter", "neck", "cold", "hair", "sluggish", "constipated"],
     ["levothyroxine", "tsh", "hypothyroidism", "endocrine", "thyroxine", "autoimmune"]),
    ("skin", ["rash", "itch", "red", "patches", "flaky", "scratching"],
     ["dermatitis", "eczema", "topical", "emollient", "keratinocyte", "dermatology"]),
    ("stomach", ["heartburn", "burping", "bloated", "acid", "belly", "spicy"],
     ["gastric", "omeprazole", "reflux", "esophageal", "endoscopy", "helicobacter"]),
    ("infection", ["fever", "chills", "shivering", "sore", "throat", "pus"],
     ["bacterial", "antibiotic", "amoxicillin", "culture", "sepsis", "leukocytosis"]),
    ("pregnancy", ["expecting", "baby", "morning", "kicks", "bump", "due"],
     ["obstetric", "gestational", "prenatal", "ultrasound", "trimester", "fetal"]),
    ("eyes", ["blurry", "squinting", "glasses", "floaters", "dry", "reading"],
     ["ophthalmology", "retinal", "glaucoma", "intraocular", "cataract", "visual"]),
    ("teeth", ["toothache", "gums", "bleeding", "chewing", "sensitive", "cavity"],
     ["dental", "periodontal", "caries", "enamel", "extraction", "orthodontic"]),
    ("allergy", ["sneezing", "runny", "nose", "watery", "hay", "cats"],
     ["antihistamine", "allergen", "immunoglobulin", "histamine", "rhinitis", "desensitization"]),
    ("sleep", ["snoring", "insomnia", "awake", "drowsy", "naps", "restless"],
     ["apnea", "polysomnography", "melatonin", "circadian", "cpap", "hypersomnia"]),
]
FILLER_Q = ["my", "i", "have", "feel", "very", "lately", "often", "and"]
FILLER_D = ["the", "with", "of", "for", "a", "in"]


def write_jsonl(path, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for r in rows:
            f.write(json.dumps(r, ensure_ascii=False) + "\n")


def abstracts(rng):
    rows = []
    for i in range(200):
        drug, drug2 = rng.sample(DRUGS, 2)
        ae1, ae2 = rng.sample(ADVERSE, 2)
        text = rng.choice(TEMPLATES).format(
            disease=rng.choice(DISEASES), outcome=rng.choice(OUTCOMES), population=rng.choice(POPULATIONS),
            design=rng.choice(DESIGNS), n=rng.randint(40, 4000), drug=drug, drug2=drug2,
            marker=rng.choice(MARKERS), pct=rng.randint(5, 60), p=rng.randint(1, 5), ae1=ae1, ae2=ae2,
            method=rng.choice(METHODS), weeks=rng.choice([4, 8, 12, 24, 52]))
        if i % 10 == 3:
            text = "<p>" + text.replace(". ", ".</p>\n<p>", 1) + "</p>"
        if i % 15 == 7:
            text += " Full text available at https://example.org/abstracts/" + str(i) + " ."
        if i % 25 == 11:
            first = text.split(". ")[0] + "."
            text = first + "\n\n" + first + "\n\n" + text
        rows.append({"id": f"abs-{i:04d}", "text": text, "source": "synthetic_abstracts"})
    # Five verbatim duplicates under fresh ids.
    for j, src in enumerate([5, 40, 77, 120, 199]):
        rows.append({"id": f"abs-dup-{j}", "text": rows[src]["text"], "source": "synthetic_abstracts"})
    return rows


def general(rng):
    rows = []
    for i in range(300):
        text = rng.choice(GENERAL).format(
            person=rng.choice(PEOPLE), place=rng.choice(PLACES), item=rng.choice(ITEMS), n=rng.randint(2, 90),
            topic=rng.choice(TOPICS), day=rng.choice(DAYS), weather=rng.choice(WEATHER))
        rows.append({"id": f"gen-{i:04d}", "text": text, "source": "synthetic_general"})
    return rows


def topic_sentence(rng, words, filler, n_topic):
    toks = rng.sample(words, n_topic) + rng.sample(filler, 2)
    rng.shuffle(toks)
    return " ".join(toks)


def covering_sentences(rng, words, filler, n_topic, count):
    # Cyclic windows over a shuffled word list: every topic word appears in
    # count * n_topic // len(words) or one more of the sentences.
    order = rng.sample(words, len(words))
    out = []
    for k in range(count):
        toks = [order[(k * n_topic + j) % len(order)] for j in range(n_topic)] + rng.sample(filler, 2)
        rng.shuffle(toks)
        out.append(" ".join(toks))
    return out


def topics(rng):
    train, heldout_q, heldout_d, qrels = [], [], [], []
    for t, (name, qw, dw) in enumerate(TOPIC_WORDS):
        queries = covering_sentences(rng, qw, FILLER_Q, 4, 4)
        positives = covering_sentences(rng, dw, FILLER_D, 4, 4)
        for k in range(4):
            train.append({"query": queries[k], "positive": positives[k], "source_id": f"synthetic_set_{k}"})
        heldout_q.append({"id": f"q{t:02d}", "text": topic_sentence(rng, qw, FILLER_Q, 4)})
        heldout_d.append({"id": f"doc-{name}", "text": topic_sentence(rng, dw, FILLER_D, 4)})
        qrels.append({"qid": f"q{t:02d}", "did": f"doc-{name}", "rel": 1})
    return train, heldout_q, heldout_d, qrels


def main():
    rng = random.Random(20240601)
    write_jsonl(ROOT / "corpus" / "medical_abstracts.jsonl", abstracts(rng))
    write_jsonl(ROOT / "corpus" / "general_english.jsonl", general(rng))
    train, q, corpus, qrels = topics(rng)
    write_jsonl(ROOT / "pairs" / "topic_pairs.jsonl", train)
    write_jsonl(ROOT / "eval" / "topics" / "queries.jsonl", q)
    write_jsonl(ROOT / "eval" / "topics" / "corpus.jsonl", corpus)
    write_jsonl(ROOT / "eval" / "topics" / "qrels.jsonl", qrels)
    texts = [r["query"] for r in train] + [r["positive"] for r in train]
    texts += [r["text"] for r in q] + [r["text"] for r in corpus]
    write_jsonl(ROOT / "corpus" / "topic_text.jsonl",
                [{"id": f"topic-{i:04d}", "text": t} for i, t in enumerate(texts)])


if __name__ == "__main__":
    main()
