# globals.py
# Define global constants and default configuration parameters

import os
from pathlib import Path
from dotenv import load_dotenv

BASE_DIR = Path(__file__).parent.parent
LOGS_DIR = BASE_DIR / 'logs'
CONFIGS_DIR = BASE_DIR / 'configs'

load_dotenv(BASE_DIR / '.env')

# Worker parallelism (1 keeps every run bitwise reproducible)
NUM_WORKERS = max(1, int(os.getenv('GEO_NUM_WORKERS', '1')))

# On-disk format versions
SAMPLE_SCHEMA_VERSION = 1
CHECKPOINT_SCHEMA_VERSION = 1
PREDICTION_SCHEMA_VERSION = 1

# Frame identifiers
VIEW_FRAMES = ('view0', 'view1')
WORLD_FRAME = 'world'

# Camera model
FOCAL_FACTOR = 1.0  # fx = fy = FOCAL_FACTOR * image width
MIN_INTRINSICS_PIXELS = 10
MIN_DEPTH_SPREAD = 1e-6  # Relative depth spread below which a pointmap counts as one fronto-parallel plane

# Synthetic scenes
WORKING_VOLUME = 1.5  # Half-extent of the cube primitives are placed in
TARGET_RADIUS = 0.5  # First primitive always sits inside this ball around the origin
CAMERA_DISTANCE = (3.5, 5.0)
CAMERA_ELEVATION_DEG = (15.0, 45.0)
PAIR_AZIMUTH_DEG = (10.0, 45.0)
OVERLAP_RESOLUTION = 32  # Overlap is measured here so pairs do not depend on resolution
CAMERA_RETRY_CAP = 100
DEFAULT_PRIMITIVES = 4
DEFAULT_MIN_OVERLAP = 0.3
LIGHT_DIRECTION = (-0.4, 0.3, -0.85)  # Direction light travels, world frame
AMBIENT = 0.25
MIN_ALBEDO_CONTRAST = 0.3
CORRESPONDENCE_PX = 0.5
CORRESPONDENCE_DEPTH_REL = 0.01

# Rotary encoding
ROPE_BASE_FREQUENCY = 100.0

# Model (desk-scale defaults, not taken from any released model)
PATCH_SIZE = 16
EMBED_DIM = 128
DECODER_DIM = 128
N_ENC_BLOCKS = 2
N_DEC_BLOCKS = 2
N_HEADS = 4
DESCRIPTOR_DIM = 24
MLP_RATIO = 4
INIT_STD = 0.02

# Loss weights
STAGE1_WEIGHTS = (1.0, 0.1, 0.075)  # eta1, eta2, eta3
STAGE2_WEIGHTS = (1.0, 0.1, 1.0)  # lambda1, lambda2, lambda3
MATCH_TAU = 10.0
MATCH_SIGN = 'similarity-positive'
MAX_CORRESPONDENCES = 1024

# Training schedule
COARSE_RESOLUTION = 64
FINE_RESOLUTION = 128
LEARNING_RATE = 1e-3
WEIGHT_DECAY = 0.0
WARMUP_FRACTION = 0.05
BATCH_SIZE = 4
BACKBONE_PREFIXES = ('patch_embed', 'enc_blocks', 'enc_norm', 'decoder_embed', 'dec_blocks', 'dec_norm')
HEAD_NAMES = ('pointmap', 'normal', 'matching', 'depth')
STAGE_HEADS = {
    'stage1': ('pointmap', 'matching'),
    'stage2': ('pointmap', 'normal'),
}
STAGE_PREREQUISITE = {'stage2': 'stage1', 'heads-only': 'stage2'}

# Multi-view alignment
HUBER_DELTA = 0.1
ALIGN_MAX_ITERATIONS = 2000
ALIGN_TOLERANCE = 1e-8
ALIGN_STEP_SIZE = 1e-2
RANSAC_ITERATIONS = 1000
RANSAC_THRESHOLD = 0.05

# Evaluation
NORMAL_THRESHOLDS_DEG = (11.25, 22.5, 30.0)
DEPTH_DELTA_BASE = 1.25
MATCH_RADIUS_PX = 2.0
POSE_AUC_THRESHOLDS_DEG = (5.0, 10.0, 20.0)
