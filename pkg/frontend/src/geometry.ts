// Client-side 88-key layout, matching the service's keyboard model:
// x along the pitch axis in mm, y front(0)-to-back, z above the white surface.

export interface KeyBox {
  x_min: number;
  x_max: number;
  y_min: number;
  y_max: number;
  surface_z: number;
  is_black: boolean;
}

export interface GeometryConstants {
  octave_span_mm: number;
  white_key_length_mm: number;
  black_key_length_mm: number;
  black_key_height_mm: number;
  black_key_width_mm: number;
}

export const DEFAULT_CONSTANTS: GeometryConstants = {
  octave_span_mm: 165,
  white_key_length_mm: 150,
  black_key_length_mm: 95,
  black_key_height_mm: 12.5,
  black_key_width_mm: 13.7,
};

const WHITE_CLASSES = new Set([0, 2, 4, 5, 7, 9, 11]);
const LOWEST_MIDI = 21;

export function buildKeys(constants: GeometryConstants = DEFAULT_CONSTANTS): KeyBox[] {
  const whiteW = constants.octave_span_mm / 7;
  const keys: KeyBox[] = [];
  let whites = 0;
  for (let k = 0; k < 88; k++) {
    const midi = LOWEST_MIDI + k;
    if (WHITE_CLASSES.has(midi % 12)) {
      keys.push({
        x_min: whites * whiteW,
        x_max: (whites + 1) * whiteW,
        y_min: 0,
        y_max: constants.white_key_length_mm,
        surface_z: 0,
        is_black: false,
      });
      whites++;
    } else {
      const center = whites * whiteW;
      keys.push({
        x_min: center - constants.black_key_width_mm / 2,
        x_max: center + constants.black_key_width_mm / 2,
        y_min: constants.white_key_length_mm - constants.black_key_length_mm,
        y_max: constants.white_key_length_mm,
        surface_z: constants.black_key_height_mm,
        is_black: true,
      });
    }
  }
  return keys;
}

export function keyboardSpan(keys: KeyBox[]): number {
  return keys[keys.length - 1].x_max - keys[0].x_min;
}
