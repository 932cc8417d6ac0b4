import numpy as np
import os
import logging
# Configure logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
def _load_data_files(data_file_path):
    input_path_list = []
    annotation_path_list = []
    # Check if the data file exists
    if not os.path.exists(data_file_path):
        logging.error(f"Data file not found: {data_file_path}")
        raise FileNotFoundError(f"Data file not found: {data_file_path}")
    data_folder_path = os.path.dirname(os.path.abspath(data_file_path))
    try:
        with open(data_file_path, 'rt') as f:
            for line in f:
                # Split the line into input and annotation paths
                parts = line.strip().split(' ')
                if len(parts) != 2:
                    logging.warning(f"Skipping invalid line: {line.strip()}")
                    raise ValueError(f"Invalid line format: {line.strip()}")
                input_path, annotation_path = parts
                # Construct full paths
                full_input_path = os.path.join(data_folder_path, input_path)
                full_annotation_path = os.path.join(data_folder_path, annotation_path)
                # Validate paths
                if not os.path.exists(full_input_path) or not os.path.exists(full_annotation_path):
                    logging.warning(f"Skipping non-existent paths: {full_input_path} or {full_annotation_path}")
                    raise ValueError(f"Non-existent paths: {full_input_path} or {full_annotation_path}")  ##### ValueError raise added here ##### 
                input_path_list.append(full_input_path)
                annotation_path_list.append(full_annotation_path)
    except Exception as e:
        logging.error(f"Error reading data file: {e}")
        raise
    return np.array(input_path_list), np.array(annotation_path_list)
