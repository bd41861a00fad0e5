from diffusion.ddim import (InversionResult, ddim_generate, ddim_invert, ddim_step,
                            inversion_timesteps, predict_noise)
from diffusion.latent import LatentState, SpaceToDepthCodec, decode_latent, encode_latent
from diffusion.schedule import NoiseSchedule, forward_noise, make_schedule, mix
