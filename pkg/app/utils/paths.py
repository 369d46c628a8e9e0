import os

# project/
BASE_DIR = os.path.abspath(
    os.path.join(os.path.dirname(__file__), "..", "..")
)
RESOURCE_DIR = os.path.join(BASE_DIR, "resources")
LEXICON_PATH = os.path.join(RESOURCE_DIR, "lexicon.tsv")
TEMPLATES_PATH = os.path.join(RESOURCE_DIR, "templates.txt")
DEFAULT_OUTPUT_DIR = os.path.join(BASE_DIR, "runs")
