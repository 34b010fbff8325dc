"""Chat-completion judge client and the baseline risk-prediction prompt
templates.

The judge counts how many predicted disorder names match the label names
(tolerantly, allowing synonyms and more/less specific forms) and must answer
with a JSON object carrying ``number_of_direct_matches``. Replies are parsed
with a first-balanced-braces scan so prose-wrapped JSON still works.
"""

import ast
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import requests

from .errors import DataError, TimelineLMError

logger = logging.getLogger(__name__)


class JudgeError(TimelineLMError):
    pass


@dataclass
class JudgeResult:
    explanation: str
    number_of_direct_matches: int


@dataclass
class EndpointConfig:
    url: str
    model: str
    api_key: str | None = None
    auth_header: str = "Authorization"
    auth_scheme: str = "Bearer"  # set to "" to send the bare key
    temperature: float = 0.0
    timeout_s: float = 30.0
    max_retries: int = 3
    backoff_s: float = 0.5
    max_concurrent: int = 4


JUDGE_SYSTEM_PROMPT = """\
You are now playing the role of a medical doctor taking an exam,
your goal is to be as accurate as possible and make sure you do
not make any mistakes. If you are unsure about something, think
step by step and then answer. You have to follow the instructions
precisely.

Your first task is to compare how many of the predicted disorders
marked as `Predictions:` match the labels marked as `Labels:` in the input.
Please take care that predictions can contain
some additional text, but feel free to ignore it and only take the
predicted disorders. Something is a match if it is
approximately the same disorder (based on the definition of the
disorder). For example `Diabetes` and `T1DM`
are a match, T1DM and T2DM are types of `Diabetes`, i.e. they
are more specific. The reverse is also fine, T1DM is a match for Diabetes.
The output should be a json file formatted as follows:
{'explanation': <your brief explanation>, 'number_of_direct_matches': <number>}"""

JUDGE_USER_TEMPLATE = "Labels: {labels}\nPredictions: {predictions}"


def extract_json_object(text: str) -> dict:
    """Parse the first balanced-braces object in the text.

    Accepts both strict JSON and single-quoted dict literals, since the
    requested output format uses single quotes.
    """
    start = text.find("{")
    if start < 0:
        raise DataError("no JSON object in reply")
    depth = 0
    in_string: str | None = None
    escaped = False
    for i in range(start, len(text)):
        ch = text[i]
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == in_string:
                in_string = None
            continue
        if ch in "\"'":
            in_string = ch
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                candidate = text[start:i + 1]
                try:
                    return json.loads(candidate)
                except json.JSONDecodeError:
                    pass
                try:
                    value = ast.literal_eval(candidate)
                except (ValueError, SyntaxError) as exc:
                    raise DataError(f"unparseable JSON object: {candidate[:80]!r}") from exc
                if not isinstance(value, dict):
                    raise DataError("reply object is not a mapping")
                return value
    raise DataError("unbalanced braces in reply")


def _post_chat(messages: list[dict], cfg: EndpointConfig) -> str:
    headers = {"Content-Type": "application/json"}
    if cfg.api_key:
        value = f"{cfg.auth_scheme} {cfg.api_key}".strip()
        headers[cfg.auth_header] = value
    body = {"model": cfg.model, "messages": messages, "temperature": cfg.temperature}
    resp = requests.post(cfg.url, json=body, headers=headers, timeout=cfg.timeout_s)
    if resp.status_code >= 500:
        raise JudgeError(f"endpoint returned {resp.status_code}")
    if resp.status_code != 200:
        raise JudgeError(f"endpoint rejected request: {resp.status_code} {resp.text[:200]}")
    try:
        payload = resp.json()
        return payload["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise JudgeError(f"malformed endpoint reply: {resp.text[:200]}") from exc


def chat_completion(messages: list[dict], cfg: EndpointConfig) -> str:
    """POST to the endpoint with retries on transient failures."""
    last: Exception | None = None
    for attempt in range(cfg.max_retries):
        try:
            return _post_chat(messages, cfg)
        except (requests.RequestException, JudgeError) as exc:
            last = exc
            logger.warning("endpoint attempt %d/%d failed: %s", attempt + 1,
                           cfg.max_retries, exc)
            if attempt + 1 < cfg.max_retries and cfg.backoff_s:
                time.sleep(cfg.backoff_s * (attempt + 1))
    raise JudgeError(f"endpoint failed after {cfg.max_retries} attempts: {last}")


def judge_via_llm(predictions: list[str], labels: list[str],
                  cfg: EndpointConfig) -> JudgeResult:
    """Ask the endpoint how many predicted disorder names match the labels.

    Inputs are names, not codes; convert codes before calling.
    """
    messages = [
        {"role": "system", "content": JUDGE_SYSTEM_PROMPT},
        {"role": "user", "content": JUDGE_USER_TEMPLATE.format(
            labels=", ".join(labels), predictions=", ".join(predictions))},
    ]
    reply = chat_completion(messages, cfg)
    try:
        obj = extract_json_object(reply)
    except DataError as exc:
        raise JudgeError(str(exc)) from exc
    if "number_of_direct_matches" not in obj:
        raise JudgeError(f"reply object missing number_of_direct_matches: {obj!r}")
    matches = int(obj["number_of_direct_matches"])
    matches = max(0, min(matches, len(predictions)))
    return JudgeResult(explanation=str(obj.get("explanation", "")),
                       number_of_direct_matches=matches)


def judge_cohort(items: list[tuple[str, list[str], list[str]]],
                 cfg: EndpointConfig) -> tuple[dict[str, JudgeResult], list[str]]:
    """Judge many patients concurrently; failed patients are dropped from the
    judged support and returned separately. Results sorted by patient id."""

    def one(item):
        pid, predictions, labels = item
        try:
            return pid, judge_via_llm(predictions, labels, cfg), None
        except JudgeError as exc:
            logger.warning("judge failed for %s: %s", pid, exc)
            return pid, None, str(exc)

    results: dict[str, JudgeResult] = {}
    failed: list[str] = []
    with ThreadPoolExecutor(max_workers=max(1, cfg.max_concurrent)) as pool:
        for pid, result, _err in pool.map(one, items):
            if result is None:
                failed.append(pid)
            else:
                results[pid] = result
    return dict(sorted(results.items())), sorted(failed)


# ---------------------------------------------------------------------------
# Baseline prompt templates
# ---------------------------------------------------------------------------

PROMPT_FORMATS = ("gpt4", "biomistral", "medalpaca", "meditron")

RISK_SYSTEM_PROMPT = """\
You are now playing the role of a medical doctor taking an exam,
your goal is to be as accurate as possible and make sure you do
not make any mistakes. If you are unsure about something, think
step by step and then answer. You have to follow the instructions
precisely.

Your first question in this medical quiz will consist of a patient history,
your goal is to predict {limit} specific disorders the patient is at risk for in the next
month. Please take care that the disorders you are predicting cannot be part of
the patient's past. They have to be new disorders that will most likely affect the
patient in the next month. You have to predict specific disorders,
for example:
you should never say "pulmonary problems" as this is not a specific disorder,
but you can say "pneumonia" as that is a specific disorder."""

RISK_USER_TEMPLATE = """\
{history}

Given the above patient history. What {limit} specific new disorders is this \
patient at risk for in the next month?"""

BIOMISTRAL_TEMPLATE = """\
<s>Please truthfully answer the following question. Please ensure that your \
choice is socially unbiased and positive. If you don't know the answer to a \
question, please don't share false information.

<patient_history>
{history}
</patient_history>

Given the above patient history, what {limit} specific new disorders is this \
patient at risk for in the next month? The answer is:"""

MEDALPACA_TEMPLATE = """\
Context: {history}

Question: Given the above patient history, what {limit} specific new \
disorders is this patient at risk for in the next month?

Answer:"""

MEDITRON_TEMPLATE = """\
<|im_start|>system
{system}<|im_end|>
<|im_start|>question
{prompt}<|im_end|>
<|im_start|>answer
"""


class PromptTooLong(TimelineLMError):
    pass


def count_prompt_tokens(text: str) -> int:
    """Whitespace-token proxy for an endpoint's sequence budget."""
    return len(text.split())


def baseline_messages(history: str, fmt: str = "gpt4", limit: int = 5) -> list[dict]:
    """Chat messages for a baseline endpoint (system+user for gpt4, single
    user message for the local-model formats)."""
    prompt = render_baseline_prompt(history, fmt, limit)
    if fmt == "gpt4":
        return [
            {"role": "system", "content": RISK_SYSTEM_PROMPT.format(limit=limit)},
            {"role": "user", "content": RISK_USER_TEMPLATE.format(history=history,
                                                                  limit=limit)},
        ]
    return [{"role": "user", "content": prompt}]


def render_baseline_prompt(history: str, fmt: str = "gpt4", limit: int = 5,
                           max_tokens: int | None = None,
                           generation_budget: int = 128) -> str:
    """Render the full prompt text for one of the known formats.

    With ``max_tokens`` set, prompts longer than max_tokens - generation_budget
    raise PromptTooLong so the caller can skip and log the patient.
    """
    if fmt not in PROMPT_FORMATS:
        raise DataError(f"unknown prompt format {fmt!r}; choose from {PROMPT_FORMATS}")
    if fmt == "gpt4":
        text = (RISK_SYSTEM_PROMPT.format(limit=limit) + "\n\n"
                + RISK_USER_TEMPLATE.format(history=history, limit=limit))
    elif fmt == "biomistral":
        text = BIOMISTRAL_TEMPLATE.format(history=history, limit=limit)
    elif fmt == "medalpaca":
        text = MEDALPACA_TEMPLATE.format(history=history, limit=limit) + " "
    else:
        text = MEDITRON_TEMPLATE.format(
            system=RISK_SYSTEM_PROMPT.format(limit=limit),
            prompt=RISK_USER_TEMPLATE.format(history=history, limit=limit),
        )
    if max_tokens is not None and count_prompt_tokens(text) > max_tokens - generation_budget:
        raise PromptTooLong(
            f"prompt of {count_prompt_tokens(text)} tokens exceeds budget "
            f"{max_tokens} - {generation_budget}"
        )
    return text


def render_baseline_prompts(histories: dict[str, str], fmt: str, limit: int = 5,
                            max_tokens: int | None = None) -> tuple[dict[str, str], list[str]]:
    """Render a cohort, skipping over-budget histories with a logged reason."""
    prompts: dict[str, str] = {}
    skipped: list[str] = []
    for pid in sorted(histories):
        try:
            prompts[pid] = render_baseline_prompt(histories[pid], fmt, limit, max_tokens)
        except PromptTooLong as exc:
            logger.info("prompt for %s skipped: %s", pid, exc)
            skipped.append(pid)
    return prompts, skipped
