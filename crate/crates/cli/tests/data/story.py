"""Toy story generator for the process executor.

Reads a request on stdin and answers with one story per row:
{"cells": {"story_id": [...], "story": [...]}}.
"""
import json
import sys

CHARACTERS = ["a fox", "a lighthouse keeper", "two robots", "the moon"]
PLACES = ["in a quiet forest", "by the sea", "on a cold planet", "above the city"]


def story(i, topic):
    who = CHARACTERS[i % len(CHARACTERS)]
    where = PLACES[(i * 3 + 1) % len(PLACES)]
    return f"Once, {who} lived {where}. One day they found {topic}, and nothing was the same."


req = json.load(sys.stdin)
n = int(req["args"].get("n", 3))
topic = str(req["args"].get("topic", "a map"))
print(json.dumps({"cells": {"story_id": list(range(n)), "story": [story(i, topic) for i in range(n)]}}))
